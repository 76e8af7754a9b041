"""
Prompt templates

One template per model role. Every template ends with a machine-parseable
final-line contract (marker + token) that the gateway's parsers rely on.
"""

import string
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, FrozenSet, Mapping, Tuple

from ehr_rag.errors import ParameterError, TemplateRenderError

if TYPE_CHECKING:
    from ehr_rag.core_model import TaskSpec

FINAL_MARKER = "FINAL:"
HYPOTHESIS_MARKER = "HYPOTHESIS:"
SUFFICIENT_MARKER = "SUFFICIENT:"
MISSING_MARKER = "MISSING:"
SELECTED_MARKER = "SELECTED:"
QUERY_MARKER = "QUERY:"

NO_EVIDENCE = "(no evidence retrieved)"
NO_NUMERIC_EVIDENCE = "(no numeric indicators retrieved)"
INLINE_NUMERIC = "(numeric values appear inline with the clinical events)"


class TemplateId(str, Enum):
    BASELINE_PREDICT = "baseline_predict"
    INDICATOR_SELECT = "indicator_select"
    QUERY_REFINE = "query_refine"
    SUFFICIENCY = "sufficiency"
    FACTUAL_HYPOTHESIS = "factual_hypothesis"
    COUNTERFACTUAL_HYPOTHESIS = "counterfactual_hypothesis"
    EVIDENCE_FUSION = "evidence_fusion"
    REACT_STEP = "react_step"


def placeholders_of(body: str) -> FrozenSet[str]:
    return frozenset(name for _, name, _, _ in string.Formatter().parse(body) if name)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_vars: Tuple[str, ...]

    def __post_init__(self):
        undeclared = placeholders_of(self.body) - set(self.required_vars)
        if undeclared:
            raise ParameterError(
                f"Template '{self.template_id}' uses undeclared placeholders: {sorted(undeclared)}"
            )

    def render(self, variables: Mapping[str, str]) -> str:
        """
        Substitute every placeholder verbatim

        Raises:
            TemplateRenderError: naming the first missing variable
        """
        for name in self.required_vars:
            if name not in variables:
                raise TemplateRenderError(str(self.template_id), name)
        return self.body.format_map({name: str(variables[name]) for name in self.required_vars})


_CONTEXT = """Task: {task_description}

Instructions: {instructions}

Possible labels: {label_space}

Numeric indicators (most recent measurements per indicator):
{numeric_evidence}

Clinical events (chronological):
{textual_evidence}
"""

_CONTEXT_VARS = ("task_description", "instructions", "label_space", "numeric_evidence", "textual_evidence")


TEMPLATES: Dict[TemplateId, PromptTemplate] = {
    TemplateId.BASELINE_PREDICT: PromptTemplate(
        TemplateId.BASELINE_PREDICT.value,
        "You are a clinical prediction assistant reviewing a patient's structured health record.\n\n"
        + _CONTEXT
        + "\nPredict the outcome for this patient at the prediction time. Explain briefly, "
        "then end with a single line of the form 'FINAL: <label>'.",
        _CONTEXT_VARS,
    ),
    TemplateId.INDICATOR_SELECT: PromptTemplate(
        TemplateId.INDICATOR_SELECT.value,
        "You are selecting laboratory and vital-sign indicators relevant to a clinical prediction task.\n\n"
        "Task query: {task_query}\n\n"
        "Candidate indicators (one per line):\n{candidates}\n\n"
        "Choose exactly {n_fine} indicators from the candidate list, most relevant first. "
        "Use the names exactly as listed. End with a single line of the form "
        "'SELECTED: <name>; <name>; ...'.",
        ("task_query", "candidates", "n_fine"),
    ),
    TemplateId.SUFFICIENCY: PromptTemplate(
        TemplateId.SUFFICIENCY.value,
        "You are checking whether retrieved clinical evidence is enough to make a prediction.\n\n"
        "Task: {task_description}\n\n"
        "Current retrieval query: {query}\n\n"
        "Retrieved evidence (chronological):\n{evidence}\n\n"
        "Is this evidence sufficient to predict the outcome? End with a single line "
        "'SUFFICIENT: yes' or 'SUFFICIENT: no'.",
        ("task_description", "query", "evidence"),
    ),
    TemplateId.QUERY_REFINE: PromptTemplate(
        TemplateId.QUERY_REFINE.value,
        "You are refining a search over a patient's health record.\n\n"
        "Previous query: {query}\n\n"
        "Evidence retrieved so far (chronological):\n{evidence}\n\n"
        "Name the single most important clinical aspect that is still missing. The new query "
        "must be concise, cover one clinical dimension only, and must not repeat the previous "
        "query. End with a single line of the form 'MISSING: <new query>'.",
        ("query", "evidence"),
    ),
    TemplateId.FACTUAL_HYPOTHESIS: PromptTemplate(
        TemplateId.FACTUAL_HYPOTHESIS.value,
        "You are reviewing evidence that may SUPPORT the target outcome.\n\n"
        + _CONTEXT
        + "\nForm an explicit outcome hypothesis from this evidence. End with a single line "
        "of the form 'HYPOTHESIS: <label> | <one-sentence rationale>'.",
        _CONTEXT_VARS,
    ),
    TemplateId.COUNTERFACTUAL_HYPOTHESIS: PromptTemplate(
        TemplateId.COUNTERFACTUAL_HYPOTHESIS.value,
        "You are reviewing evidence that may ARGUE AGAINST the target outcome.\n\n"
        + _CONTEXT
        + "\nForm an explicit outcome hypothesis from this evidence. End with a single line "
        "of the form 'HYPOTHESIS: <label> | <one-sentence rationale>'.",
        _CONTEXT_VARS,
    ),
    TemplateId.EVIDENCE_FUSION: PromptTemplate(
        TemplateId.EVIDENCE_FUSION.value,
        "You are making the final clinical prediction from evidence gathered for and against the outcome.\n\n"
        + _CONTEXT
        + "\nSupporting hypothesis: {factual_hypothesis}\n"
        "Opposing hypothesis: {counterfactual_hypothesis}\n\n"
        "Compare the two hypotheses by the strength, directness and clinical relevance of their "
        "evidence. End with a single line of the form 'FINAL: <label>'.",
        _CONTEXT_VARS + ("factual_hypothesis", "counterfactual_hypothesis"),
    ),
    TemplateId.REACT_STEP: PromptTemplate(
        TemplateId.REACT_STEP.value,
        "You are searching a patient's health record step by step.\n\n"
        "Task: {task_description}\n\n"
        "Queries issued so far:\n{history}\n\n"
        "Evidence retrieved so far (chronological):\n{evidence}\n\n"
        "Think about what to look up next. Write your thought, then end with a single line "
        "of the form 'QUERY: <search query>'.",
        ("task_description", "history", "evidence"),
    ),
}


def render_prompt(template_id: TemplateId, variables: Mapping[str, str]) -> str:
    """Render one of the registered templates"""
    try:
        template = TEMPLATES[TemplateId(template_id)]
    except (KeyError, ValueError) as e:
        raise ParameterError(f"Unknown template '{template_id}'") from e
    return template.render(variables)


def context_variables(task: "TaskSpec", numeric_block: str, textual_block: str) -> Dict[str, str]:
    """
    Shared context block in fixed order: task, instructions, labels, numeric, textual
    """
    return {
        "task_description": task.description,
        "instructions": task.instructions or "None.",
        "label_space": task.describe_labels(),
        "numeric_evidence": numeric_block or NO_NUMERIC_EVIDENCE,
        "textual_evidence": textual_block or NO_EVIDENCE,
    }
