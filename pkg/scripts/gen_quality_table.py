#!/usr/bin/env python3
"""Generate data/quality.yaml.

Scores not directly known are synthesized from directional rules (method
severity x task sensitivity x model vulnerability) and tagged
derived-from-trends; anchor cells carry their exact values. Regenerate with:

    python3 scripts/gen_quality_table.py > src/quantsweep/data/quality.yaml
"""

FP16_BASE = {
    "llama2-13b": {"chat-S": 60.0, "chat-R": 45.0, "chat-M": 32.0, "code": 28.0, "summarization": 42.0},
    "codellama-34b": {"chat-S": 66.0, "chat-R": 52.0, "chat-M": 40.0, "code": 48.0, "summarization": 40.0},
    "llama2-70b": {"chat-S": 72.0, "chat-R": 58.0, "chat-M": 48.0, "code": 42.0, "summarization": 46.0},
}

# Degradation severity per method (0 = lossless). W8A16-INT stays mildest so
# quality ranking favors it; W8A8-INT degrades hardest on code.
SEVERITY = {
    "W8A16-INT": 0.08,
    "W8A8-FP": 0.12,
    "W8A8KV8-FP": 0.18,
    "W8A16KV8-INT": 0.35,
    "W4A16-INT": 0.55,
    "W4A8": 0.60,
    "W4A16KV8-INT": 0.75,
    "W4A8KV8": 0.80,
    "W4A8KV4": 0.85,
    "W8A8-INT": 1.00,
    "W8A8KV8-INT": 1.1334,
}
CODE_SEVERITY = {"W8A8-INT": 1.60, "W8A8KV8-INT": 1.40}

TASK_MULT = {"chat-S": 1.0, "summarization": 1.2, "chat-R": 2.2, "chat-M": 3.5, "code": 4.5}
MODEL_VULN = {"llama2-13b": 1.0, "codellama-34b": 0.55, "llama2-70b": 0.3}
SCALE = 14.0

ANCHOR_PCT = {
    # exact reported cells
    ("llama2-13b", "W8A8KV8-INT", "chat-S"): -15.866667,  # 60 -> 50.48
    ("llama2-13b", "W8A8-INT", "code"): -92.0,
}


def pct_change(model: str, method: str, task: str) -> float:
    if (model, method, task) in ANCHOR_PCT:
        return ANCHOR_PCT[(model, method, task)]
    sev = CODE_SEVERITY.get(method, SEVERITY[method]) if task == "code" else SEVERITY[method]
    return max(-95.0, -sev * TASK_MULT[task] * MODEL_VULN[model] * SCALE)


def main() -> None:
    lines = [
        "# Quality scores (0-100) per (model, method, task).",
        "# Generated by scripts/gen_quality_table.py; anchor cells are exact",
        "# reported values, the rest are synthesized from directional trends.",
        "",
        "version: 1",
        "",
        "entries:",
    ]
    for model, base in FP16_BASE.items():
        lines.append(f"  {model}:")
        for method in ["FP16"] + list(SEVERITY):
            lines.append(f"    {method}:")
            for task, fp16_score in base.items():
                if method == "FP16":
                    score, tag = fp16_score, "fp16-baseline"
                else:
                    pct = pct_change(model, method, task)
                    score = round(fp16_score * (1 + pct / 100.0), 2)
                    tag = "reported" if (model, method, task) in ANCHOR_PCT else "derived-from-trends"
                lines.append(f'      {task}: {{score: {score}, provenance: {tag}}}')
    print("\n".join(lines))


if __name__ == "__main__":
    main()
