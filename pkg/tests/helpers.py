import numpy as np


def global_rel_error(got: dict, ref: dict) -> float:
    """||got - ref|| / ||ref|| over all tensors flattened into one vector."""
    num = sum(float(np.sum((got[k].astype(np.float64) - ref[k].astype(np.float64)) ** 2)) for k in ref)
    den = sum(float(np.sum(ref[k].astype(np.float64) ** 2)) for k in ref)
    return float(np.sqrt(num / den))


# criterion number -> list of (part, outcome, note); filled by test_acceptance, printed by conftest
ACCEPTANCE: dict[int, list[tuple[str, str, str]]] = {}


def acceptance_lines(titles: dict[int, str]) -> list[str]:
    lines = []
    for num in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[num]
        verdict = "FAIL" if any(o == "FAIL" for _, o, _ in parts) else "PASS"
        others = [o for _, o, _ in parts if o not in ("PASS", "FAIL")]
        if verdict == "PASS" and others:
            verdict += " (" + ", ".join(f"{others.count(o)} {o.lower()}" for o in sorted(set(others))) + ")"
        body = "; ".join(f"{p}: {o}" + (f" ({n})" if n else "") for p, o, n in parts)
        lines.append(f"criterion {num} {titles.get(num, '')}: {verdict}  [{body}]")
    return lines
