"""Reference values for the softmax and the score-weighted evidence pooling."""
import math


def softmax(z):
    m = max(z)
    e = [math.exp(x - m) for x in z]
    s = sum(e)
    return [x / s for x in e]


def pool(claim, evidence):
    w = [max(s, 0.0) for _, s in evidence]
    t = sum(w)
    w = [x / t for x in w] if t > 0 else [1.0 / len(evidence)] * len(evidence)
    mean = [sum(wi * v[j] for (v, _), wi in zip(evidence, w)) for j in range(len(claim))]
    return claim + mean + [c * m for c, m in zip(claim, mean)]


if __name__ == "__main__":
    print("softmax([2,1,0]) =", softmax([2.0, 1.0, 0.0]))
    print("softmax([1000,1000,1000]) =", softmax([1000.0] * 3))
    claim = [0.6, 0.8]
    print("pool 0.9/0.1 =", pool(claim, [([1.0, 0.0], 0.9), ([0.0, 1.0], 0.1)]))
    print("pool negative scores =", pool(claim, [([1.0, 0.0], -0.5), ([0.0, 1.0], -0.2)]))
