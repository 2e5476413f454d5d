"""Collects one PASS/FAIL line per acceptance criterion."""

import contextlib
import sys

RESULTS: dict[int, tuple[str, bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    detail = {"text": ""}
    try:
        yield detail
    except BaseException:
        RESULTS[number] = (title, False, detail["text"])
        _emit(number)
        raise
    RESULTS[number] = (title, True, detail["text"])
    _emit(number)


def line(number: int) -> str:
    title, ok, text = RESULTS[number]
    return f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{text}]" if text else "")


def lines():
    return [line(n) for n in sorted(RESULTS)]


def _emit(number: int) -> None:
    print(line(number), file=sys.__stdout__, flush=True)
