"""Prompt builders and strict response parsers for planning and the two reflections."""
from __future__ import annotations

import math
import re

from .errors import ResponseFormatError, RuleParseError
from .memory import ActionKind, ConfidenceEntry, check_score
from .rules import RuleTree, parse_rule_text

DEFAULT_PROFILE = (
    "You are an expert in data denoising. Your goal is to enhance the recommendation model by "
    "filtering out noisy interaction data, ensuring the model performs optimally. Your task "
    "involves assigning confidence scores to the interactions and deriving the appropriate "
    "denoising rules. Interactions with higher confidence will be kept for model training, "
    "while those with lower confidence will be discarded."
)

PLANNING_FORMAT = "The next action is: <a/b/c/d>. The reason for this decision is: <Your Explanation>."
CONFIDENCE_FORMAT = "The confidence score is <0-2>. The explanation: <Your Explanation>."
RULES_FORMAT = "The updated denoising rules are: <New Rules>."

_ACTION_MENU = """The available actions are:
a. Confidence Reflection. This action is to update the confidence score and corresponding explanation of samplings. You will choose this action when the current confidence scores assigned to the sampled data are found to be inaccurate or insufficient.
b. Rule Reflection. This action is to update denoising rule. You will choose this action when the existing denoising rule is either incorrect or can be further refined.
c. LossEraser Training. Use the confidence memory to filter data for the next recommendation training phase, then you can get new recommendation model parameters.
d. Model Evaluation. Evaluate current performance of recommendation model to show whether it has improved or worsened."""


def render_confidences(entries) -> str:
    return "\n".join(e.render() for e in entries) or "(empty)"


def render_actions(records) -> str:
    return "\n".join(r.render() for r in records) or "(none)"


def planning_prompt(entries, rules_text: str, records) -> str:
    return f"""You have three potential planning paths for deciding the next step:
1. Current Confidence-Based Planning: Current confidence scores are:
{render_confidences(entries)}
Examine the confidence levels and their associated reasons stored in your confidence data. Compare these confidence levels with the model's training results. Determine the most suitable next step and explain your reasoning.
2. Current Rule-Based Planning: Current rule:
{rules_text.strip() or "(none)"}
Refer to the rules stored in your current rule set. Compare the model training results against these rules. Decide on the most appropriate next step and provide the rationale.
3. Historical Action-Based Planning: The historical actions taken are:
{render_actions(records)}
Analyze past actions and their outcomes. Use these insights to determine the most suitable next step and explain why.
{_ACTION_MENU}
Compare the decisions with these three planning paths, then decide on the most suitable next step and explain your reasoning.
Please provide a response that strictly follows the response format:
{PLANNING_FORMAT}"""


def format_losses(values) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


def confidence_prompt(rules_text: str, entry: ConfidenceEntry, losses) -> str:
    return (
        "Please provide the updated confidence score (0-2, 0-1 means noisy sample, 1-2 means clean "
        "sample) and explain why you assigned this updated score.\n"
        f"The denoising rule is:\n{rules_text.strip()}\n"
        f"User Index is {entry.user}, Item Index is {entry.item}, "
        f"Historical Loss is {format_losses(losses)}.\n"
        f"You previously provided: The confidence score is {entry.score:.4g}. "
        f"The explanation was: {entry.reason}\n"
        "Please analyze the reason and update your confidence score and explanation accordingly.\n"
        f"The response format should be: {CONFIDENCE_FORMAT}"
    )


def rules_prompt(rules_text: str, entries, reason: str) -> str:
    return f"""The current denoising rule is:
{rules_text.strip()}
The current confidence scores and reasons are:
{render_confidences(entries)}
The reason for the agent's update denoising rule was: {reason}
Based on this information, follow these steps:
1. Analyze current confidence scores and reasons, and identify which interactions are considered noisy and which are malicious, and summarize the reasoning for categorizing these interactions as noisy or malicious.
2. Based on this analysis, compare the current denoising rule and update the denoising rule. Organize the rules hierarchically with descriptive classification labels to ensure they are clear, concise, and actionable, such as "Rule-1(Value-Related)", "Rule-1.1(Label)", "Rule-1.1.1(Label)", ..., "Rule-N(Label)", "Rule-N.1(Label)", etc., to organize different levels of rules.
3. Merge similar rules, ensuring the rules are free of redundancy.
4. Finally, output the updated denoising rules, and the response format should be strictly as follows:
{RULES_FORMAT}"""


def reprompt(prompt: str, fmt: str) -> str:
    return (f"{prompt}\n\nYour previous response did not follow the required format. "
            f"Answer again using exactly this format:\n{fmt}")


_PLAN_RE = re.compile(r"the\s+next\s+action\s+is\s*:?\s*[*_\"'`<(\[]*\s*([abcd])\b[*_\"'`>)\]]*", re.I)
_REASON_RE = re.compile(r"the\s+reason\s+for\s+(?:this|the)\s+decision\s+is\s*:?\s*(.*)", re.I | re.S)


def _clean_tail(text: str) -> str:
    text = " ".join(text.split()).strip()
    return text[:-1].rstrip() if text.endswith(".") else text


def parse_planning_response(text: str) -> tuple[ActionKind, str]:
    """``The next action is: <a-d>. The reason for this decision is: <...>.``"""
    m = _PLAN_RE.search(text)
    if not m:
        raise ResponseFormatError("planning response lacks 'The next action is: <a/b/c/d>'")
    kind = ActionKind.from_letter(m.group(1))
    r = _REASON_RE.search(text, m.end())
    if not r or not r.group(1).strip():
        raise ResponseFormatError("planning response lacks 'The reason for this decision is: ...'")
    return kind, _clean_tail(r.group(1))


_SCORE_RE = re.compile(
    r"the\s+confidence\s+score\s+is\s*:?\s*[*_]*\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)", re.I
)
_EXPLAIN_RE = re.compile(r"the\s+explanation\s*(?:is|was)?\s*:?\s*(.*)", re.I | re.S)


def parse_confidence_response(text: str) -> tuple[float, str]:
    """``The confidence score is <0-2>. The explanation: <...>.``"""
    m = _SCORE_RE.search(text)
    if not m:
        raise ResponseFormatError("confidence response lacks 'The confidence score is <s>'")
    raw = m.group(1).rstrip(".")
    try:
        score = float(raw)
    except ValueError:
        raise ResponseFormatError(f"unreadable score {raw!r}") from None
    if not math.isfinite(score):
        raise ResponseFormatError(f"non-finite score {raw!r}")
    try:
        score = check_score(score)
    except ValueError as exc:
        raise ResponseFormatError(str(exc)) from None
    e = _EXPLAIN_RE.search(text, m.end())
    if not e or not e.group(1).strip():
        raise ResponseFormatError("confidence response lacks 'The explanation: ...'")
    return score, _clean_tail(e.group(1))


_SUBJECT_RE = re.compile(r"User Index is (\d+), Item Index is (\d+)")


def parse_confidence_subject(prompt: str) -> tuple[int, int]:
    """(user, item) named by a confidence-reflection prompt."""
    m = _SUBJECT_RE.search(prompt)
    if not m:
        raise ResponseFormatError("prompt does not name an interaction")
    return int(m.group(1)), int(m.group(2))


_RULES_RE = re.compile(r"the\s+updated\s+denoising\s+rules\s+are\s*:?", re.I)


def parse_rules_response(text: str) -> RuleTree:
    """Rule outline following ``The updated denoising rules are:``."""
    m = _RULES_RE.search(text)
    if not m:
        raise ResponseFormatError("rules response lacks 'The updated denoising rules are:'")
    try:
        tree = parse_rule_text(text[m.end():])
    except RuleParseError as exc:
        raise ResponseFormatError(f"rule outline does not parse: {exc}") from None
    if not tree.roots:
        raise ResponseFormatError("rules response contains no Rule-N lines")
    return tree


def format_planning(kind: ActionKind, reason: str) -> str:
    return f"The next action is: {kind.letter}. The reason for this decision is: {reason}."


def format_confidence(score: float, reason: str) -> str:
    return f"The confidence score is {score}. The explanation: {reason}."


def format_rules(rules_text: str) -> str:
    return f"The updated denoising rules are:\n{rules_text}"


__all__ = [
    "DEFAULT_PROFILE", "planning_prompt", "confidence_prompt", "rules_prompt", "reprompt",
    "parse_planning_response", "parse_confidence_response", "parse_confidence_subject", "parse_rules_response",
    "format_planning", "format_confidence", "format_rules",
]
