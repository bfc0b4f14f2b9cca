"""Independent double-precision scalar oracles for the loss pipeline.

Pure-python implementations kept deliberately separate from the package,
used to verify the engine's temperature softmax, soft-target losses,
attention MSE, and the hybrid combination.
"""

import math


def softmax_rows(rows, temperature=1.0):
    out = []
    for row in rows:
        z = [v / temperature for v in row]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        s = sum(e)
        out.append([v / s for v in e])
    return out


def soft_ce(pt_rows, ps_rows, eps=0.0):
    """Mean over rows of -sum(p_t * log(p_s + eps))."""
    vals = [
        -sum(p * math.log(q + eps) for p, q in zip(pr, qr))
        for pr, qr in zip(pt_rows, ps_rows)
    ]
    return sum(vals) / len(vals)


def entropy(pt_rows, eps=0.0):
    return soft_ce(pt_rows, pt_rows, eps)


def kl(pt_rows, ps_rows, eps=0.0):
    return soft_ce(pt_rows, ps_rows, eps) - entropy(pt_rows, eps)


def mse(a_flat, b_flat):
    return sum((x - y) ** 2 for x, y in zip(a_flat, b_flat)) / len(a_flat)


def hybrid(distill, attention, alpha):
    return alpha * distill + (1.0 - alpha) * attention


def macro_f1(predictions, labels, num_classes):
    """Per-class precision/recall by explicit counting."""
    scores = []
    for cls in range(num_classes):
        tp = sum(1 for p, l in zip(predictions, labels) if p == cls and l == cls)
        fp = sum(1 for p, l in zip(predictions, labels) if p == cls and l != cls)
        fn = sum(1 for p, l in zip(predictions, labels) if p != cls and l == cls)
        if tp == 0:
            scores.append(0.0)
            continue
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        scores.append(2.0 * precision * recall / (precision + recall))
    return sum(scores) / num_classes
