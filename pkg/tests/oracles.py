"""Loop-based reference implementations used as independent oracles.

Plain Python floats and ``math`` only, written straight from the formulas,
with no shared code with the package.
"""
import math


def cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def h(a, b, tau):
    return math.exp(cos(a, b) / tau)


def supcon_anchor(i, Z, labels, tau, view_of=None):
    """-(1/|A(i)|) sum_{p in A(i)} log(h(z_p, z_i) / sum_{a != i} h(z_a, z_i))."""
    n = len(Z)
    positives = [
        p for p in range(n)
        if p != i and (labels[p] == labels[i] or (view_of is not None and view_of[p] == view_of[i]))
    ]
    denom = 0.0
    for a in range(n):
        if a != i:
            denom += h(Z[a], Z[i], tau)
    total = 0.0
    for p in positives:
        total += math.log(h(Z[p], Z[i], tau) / denom)
    return -total / len(positives)


def supcon(Z, labels, tau, view_of=None):
    terms = [supcon_anchor(i, Z, labels, tau, view_of) for i in range(len(Z))]
    return sum(terms) / len(terms)


def proto_tightness(F, labels, P):
    """-(1/N) sum_i cos(p_{y_i}, f_i); P maps class -> vector."""
    return -sum(cos(P[y], f) for f, y in zip(F, labels)) / len(F)


def proto_contrast(F, labels, P, tau):
    total = 0.0
    for f, y in zip(F, labels):
        s = 0.0
        for c in P:
            s += h(P[c], f, tau)
        total += -cos(P[y], f) + math.log(s)
    return total / len(F)


def softmax_over_batch(p, F, tau):
    ws = [h(p, f, tau) for f in F]
    z = sum(ws)
    return [w / z for w in ws]


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


def relation_distill(F_student, P_student, F_teacher, P_teacher, tau):
    """sum over old classes k of KL(P_student(k) || P_teacher(k))."""
    total = 0.0
    for k in P_teacher:
        ps = softmax_over_batch(P_student[k], F_student, tau)
        pt = softmax_over_batch(P_teacher[k], F_teacher, tau)
        total += kl(ps, pt)
    return total


def forgetting(rows):
    T = len(rows)
    out = []
    for j in range(T - 1):
        best = -1.0
        for l in range(j, T):
            if rows[l][j] > best:
                best = rows[l][j]
        out.append(best - rows[T - 1][j])
    return sum(out) / len(out)
