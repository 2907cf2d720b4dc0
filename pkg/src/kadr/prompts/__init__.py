"""Prompt text assets: instruction templates and their worked demonstrations."""

from __future__ import annotations

from importlib import resources


def _asset(name: str) -> str:
    return resources.files("kadr.prompts").joinpath(name).read_text(encoding="utf-8")


def _with_demo(template: str, demo_input: str, demo_output: str) -> str:
    # str.replace, not str.format: templates contain literal JSON braces
    return template.replace("{demo_input}", demo_input).replace("{demo_output}", demo_output)


DECLARE_DEMO_INPUT = _asset("declare_demo_input.txt").strip("\n")
DECLARE_DEMO_OUTPUT = _asset("declare_demo_output.txt").strip("\n")
DECLARE_SYSTEM = _with_demo(_asset("declare_system.txt"), DECLARE_DEMO_INPUT, DECLARE_DEMO_OUTPUT)

SUMMARIZE_DEMO_INPUT = _asset("summarize_demo_input.txt").strip("\n")
SUMMARIZE_DEMO_OUTPUT = _asset("summarize_demo_output.txt").strip("\n")
SUMMARIZE_SYSTEM = _with_demo(_asset("summarize_system.txt"), SUMMARIZE_DEMO_INPUT, SUMMARIZE_DEMO_OUTPUT)

ANSWER_SYSTEM = _asset("answer_system.txt")
JUDGE_SYSTEM = _asset("judge_system.txt")
