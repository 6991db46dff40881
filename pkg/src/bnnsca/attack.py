"""Attacker and evaluator: hypothesis generation, CPA, DoM, recovery.

The leakage predictor here is the adversary's own model of the pipeline,
written against the public design description (stage widths, schedule,
reset state); it deliberately does not call into the simulator package.
The statistics engine computes Pearson correlation with one-pass
mergeable accumulators so campaigns can stream trace chunks and checkpoint
the evolution of every guess.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: One-sided z for the 99.99% confidence level used throughout.
Z_9999 = 3.719

#: Hypothesis spaces grow as 2^(2^stage); deeper stages are impractical.
MAX_ATTACK_STAGE = 3

#: Stage s of the tree holds (8+1+s)-bit partial sums.
STAGE_BITS = 9


class AttackError(ValueError):
    pass


def _norm_ppf(p: float) -> float:
    """Inverse standard normal CDF (Acklam's rational approximation)."""
    if not 0.0 < p < 1.0:
        raise AttackError(f"probability must be in (0,1), got {p}")
    a = [-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00]
    b = [-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01]
    c = [-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00]
    d = [7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00]
    plow, phigh = 0.02425, 1 - 0.02425
    if p < plow:
        q = math.sqrt(-2 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    if p > phigh:
        q = math.sqrt(-2 * math.log(1 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1)


def confidence_threshold(n_traces: int, level: float = 0.9999) -> float:
    """Correlation magnitude a sample of n traces must exceed to be
    significant at the given one-sided level (Fisher z-transform)."""
    if n_traces < 4:
        raise AttackError("need at least 4 traces for a confidence threshold")
    z = Z_9999 if level == 0.9999 else _norm_ppf(level)
    return math.tanh(z / math.sqrt(n_traces - 3))


# ---------------------------------------------------------------------------
# the adversary's pipeline slice


@dataclass(frozen=True)
class HypothesisSpace:
    """All weight guesses feeding one tree-stage register.

    Register r at stage s accumulates pixels [r*2^s, (r+1)*2^s); each of
    the 2^(2^s) guesses assigns one sign bit per pixel (bit j set means
    weight +1 on pixel r*2^s + j).
    """

    stage: int
    register: int
    node: int = 0

    def __post_init__(self):
        if not 1 <= self.stage <= MAX_ATTACK_STAGE + 10:
            raise AttackError(f"stage {self.stage} out of range")
        if self.register < 0 or self.node < 0:
            raise AttackError("register and node must be non-negative")

    @property
    def group_size(self) -> int:
        return 1 << self.stage

    @property
    def n_guesses(self) -> int:
        return 1 << self.group_size

    @property
    def register_width(self) -> int:
        return STAGE_BITS + self.stage

    def inverse(self, guess: int) -> int:
        """The additive-inverse guess: every weight sign flipped."""
        return guess ^ (self.n_guesses - 1)


def guess_signs(space: HypothesisSpace) -> np.ndarray:
    """(n_guesses, group_size) matrix of +/-1 signs."""
    g = np.arange(space.n_guesses, dtype=np.int64)[:, None]
    j = np.arange(space.group_size, dtype=np.int64)[None, :]
    return ((g >> j) & 1) * 2 - 1


def predicted_register_values(space: HypothesisSpace, images: np.ndarray) -> np.ndarray:
    """The targeted register's value under each guess: (n_guesses, n)."""
    images = np.asarray(images, dtype=np.int64)
    base = space.register * space.group_size
    group = np.zeros((images.shape[0], space.group_size), dtype=np.int64)
    hi = min(images.shape[1], base + space.group_size)
    if hi > base:
        group[:, : hi - base] = images[:, base:hi]
    return guess_signs(space) @ group.T


def predicted_hd(space: HypothesisSpace, values: np.ndarray, prev=0) -> np.ndarray:
    """Hamming distance of the register transition prev -> value.

    For node 0 the pipeline is empty after reset, so prev defaults to 0
    and the prediction degenerates to the hamming weight of the value.
    """
    mask = (1 << space.register_width) - 1
    return np.bitwise_count((np.asarray(values) ^ prev) & mask).astype(np.int64)


def hypothesis_hd(space: HypothesisSpace, guess: int, image: np.ndarray, prev: int = 0) -> int:
    """Predicted leakage of the targeted register for one image."""
    if not 0 <= guess < space.n_guesses:
        raise AttackError(f"guess {guess} out of range for {space.n_guesses}")
    vals = predicted_register_values(space, np.asarray(image)[None, :])
    return int(predicted_hd(space, vals[guess, 0], prev))


def prediction_matrix(space: HypothesisSpace, images: np.ndarray, prev=0) -> np.ndarray:
    """(n_guesses, n_traces) predicted leakages for CPA."""
    return predicted_hd(space, predicted_register_values(space, images), prev)


def true_guess(space: HypothesisSpace, weights_row: np.ndarray) -> int:
    """Guess index encoding the actual weight bits of the target node."""
    base = space.register * space.group_size
    bits = np.zeros(space.group_size, dtype=np.int64)
    hi = min(weights_row.shape[0], base + space.group_size)
    if hi > base:
        bits[: hi - base] = weights_row[base:hi]
    return int((bits << np.arange(space.group_size)).sum())


# ---------------------------------------------------------------------------
# streaming Pearson engine


@dataclass
class PearsonAccumulator:
    """One-pass sums for Pearson correlation between G predictors and T
    trace columns.  Accumulators are mergeable and associative, so chunked
    and distributed accumulation reduce to the same result."""

    n: int
    sx: np.ndarray   # (G,)
    sxx: np.ndarray  # (G,)
    sy: np.ndarray   # (T,)
    syy: np.ndarray  # (T,)
    sxy: np.ndarray  # (G, T)

    @classmethod
    def zeros(cls, n_predictors: int, n_times: int) -> "PearsonAccumulator":
        return cls(
            n=0,
            sx=np.zeros(n_predictors),
            sxx=np.zeros(n_predictors),
            sy=np.zeros(n_times),
            syy=np.zeros(n_times),
            sxy=np.zeros((n_predictors, n_times)),
        )

    def update(self, predictions: np.ndarray, samples: np.ndarray) -> None:
        """predictions: (G, chunk); samples: (chunk, T)."""
        p = np.asarray(predictions, dtype=np.float64)
        s = np.asarray(samples, dtype=np.float64)
        if p.shape[1] != s.shape[0]:
            raise AttackError("chunk sizes disagree")
        self.n += s.shape[0]
        self.sx += p.sum(axis=1)
        self.sxx += (p * p).sum(axis=1)
        self.sy += s.sum(axis=0)
        self.syy += (s * s).sum(axis=0)
        self.sxy += p @ s

    def merge(self, other: "PearsonAccumulator") -> "PearsonAccumulator":
        return PearsonAccumulator(
            n=self.n + other.n,
            sx=self.sx + other.sx,
            sxx=self.sxx + other.sxx,
            sy=self.sy + other.sy,
            syy=self.syy + other.syy,
            sxy=self.sxy + other.sxy,
        )

    def correlations(self):
        """(rho (G,T), zero_variance flag).  Zero-variance predictor or
        trace columns yield rho 0 and set the flag rather than NaN."""
        n = self.n
        if n < 2:
            raise AttackError("need at least 2 traces for correlation")
        vx = n * self.sxx - self.sx**2
        vy = n * self.syy - self.sy**2
        vx = np.where(vx < 0, 0.0, vx)
        vy = np.where(vy < 0, 0.0, vy)
        num = n * self.sxy - np.outer(self.sx, self.sy)
        den = np.sqrt(np.outer(vx, vy))
        flag = bool((vx == 0).any() or (vy == 0).any())
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(den > 0, num / np.where(den == 0, 1.0, den), 0.0)
        return np.clip(rho, -1.0, 1.0), flag


def default_checkpoints(n_traces: int, fraction: float = 0.05) -> np.ndarray:
    """Every 5% of the trace count by default."""
    step = max(1, int(round(n_traces * fraction)))
    pts = np.arange(step, n_traces + 1, step)
    if pts.size == 0 or pts[-1] != n_traces:
        pts = np.append(pts, n_traces)
    return pts.astype(np.int64)


@dataclass
class AttackResult:
    """CPA outcome for one hypothesis space."""

    rho: np.ndarray          # (G, T) final surface
    checkpoints: np.ndarray  # (C,)
    evolution: np.ndarray    # (C, G) rho at the leak cycle
    best_guess: int
    inverse_guess: int
    leak_cycle: int
    crossing_n: object       # first checkpoint count crossing the threshold, or None
    level: float
    zero_variance: bool
    threshold: float         # threshold at the full trace count

    @property
    def crossed(self) -> bool:
        return self.crossing_n is not None


def cpa_first_order(samples: np.ndarray, predictions: np.ndarray,
                    checkpoints=None, target_cycle=None, level: float = 0.9999,
                    chunk: int = 4096) -> AttackResult:
    """Correlation attack of G guesses against (n, T) samples.

    The evolution is tracked at ``target_cycle`` when given, otherwise at
    the cycle where the final best guess peaks.
    """
    samples = np.asarray(samples)
    preds = np.asarray(predictions)
    n, T = samples.shape
    if preds.shape[1] != n:
        raise AttackError("predictions and samples disagree on trace count")
    if n < 2:
        raise AttackError("need at least 2 traces")
    if checkpoints is None:
        checkpoints = default_checkpoints(n)
    checkpoints = np.unique(np.clip(np.asarray(checkpoints, dtype=np.int64), 2, n))

    acc = PearsonAccumulator.zeros(preds.shape[0], T)
    snapshots = []
    done = 0
    for cp in checkpoints:
        while done < cp:
            take = min(chunk, cp - done)
            acc.update(preds[:, done : done + take], samples[done : done + take])
            done += take
        rho_cp, _ = acc.correlations()
        snapshots.append(rho_cp)
    rho, zero_var = acc.correlations()

    peak = np.abs(rho).max(axis=1)
    best = int(np.argmax(peak))
    inverse = best ^ (preds.shape[0] - 1) if _is_pow2_pow2(preds.shape[0]) else None
    leak_cycle = int(target_cycle) if target_cycle is not None else int(np.argmax(np.abs(rho[best])))
    evolution = np.stack([snap[:, leak_cycle] for snap in snapshots])

    crossing = None
    for ci, cp in enumerate(checkpoints):
        if abs(evolution[ci, best]) > confidence_threshold(int(cp), level):
            crossing = int(cp)
            break
    return AttackResult(
        rho=rho, checkpoints=checkpoints, evolution=evolution, best_guess=best,
        inverse_guess=inverse if inverse is not None else 0,
        leak_cycle=leak_cycle, crossing_n=crossing, level=level,
        zero_variance=zero_var, threshold=confidence_threshold(n, level),
    )


def _is_pow2_pow2(g: int) -> bool:
    return g & (g - 1) == 0


def center_square(samples: np.ndarray) -> np.ndarray:
    """Second-order preprocessing: subtract each column mean, square."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise AttackError("need at least 2 traces to center")
    centered = samples - samples.mean(axis=0, keepdims=True)
    return centered * centered


def cpa_second_order(samples: np.ndarray, predictions: np.ndarray, **kw) -> AttackResult:
    """First-order CPA on centered-squared traces, same predictor."""
    return cpa_first_order(center_square(samples), predictions, **kw)


# ---------------------------------------------------------------------------
# difference of means


@dataclass
class DomResult:
    diff: np.ndarray        # (T,) mean difference at full trace count
    halfwidth: np.ndarray   # (T,) confidence half-interval
    checkpoints: np.ndarray
    evolution_diff: np.ndarray       # (C,) at target cycle
    evolution_halfwidth: np.ndarray  # (C,)
    target_cycle: int
    crossing_n: object
    level: float

    @property
    def crossed(self) -> bool:
        return self.crossing_n is not None


def difference_of_means(samples: np.ndarray, labels: np.ndarray,
                        target_cycle=None, checkpoints=None,
                        level: float = 0.9999) -> DomResult:
    """Welch-style two-group mean test per time point, with the trace
    count at which the interval first excludes zero at the target cycle."""
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n, T = samples.shape
    if labels.shape != (n,):
        raise AttackError("labels must be one bit per trace")
    if labels.all() or not labels.any():
        raise AttackError("both partitions must be non-empty")
    if checkpoints is None:
        checkpoints = default_checkpoints(n)
    checkpoints = np.unique(np.clip(np.asarray(checkpoints, dtype=np.int64), 4, n))
    z = Z_9999 if level == 0.9999 else _norm_ppf(level)

    m = labels[:, None].astype(np.float64)
    cnt1 = np.cumsum(labels)
    cnt0 = np.arange(1, n + 1) - cnt1
    s1 = np.cumsum(samples * m, axis=0)
    s0 = np.cumsum(samples * (1 - m), axis=0)
    q1 = np.cumsum(samples**2 * m, axis=0)
    q0 = np.cumsum(samples**2 * (1 - m), axis=0)

    def stats_at(k: int):
        n1, n0 = cnt1[k - 1], cnt0[k - 1]
        if n1 < 2 or n0 < 2:
            return None
        mu1, mu0 = s1[k - 1] / n1, s0[k - 1] / n0
        v1 = np.maximum(q1[k - 1] / n1 - mu1**2, 0.0) * n1 / (n1 - 1)
        v0 = np.maximum(q0[k - 1] / n0 - mu0**2, 0.0) * n0 / (n0 - 1)
        return mu1 - mu0, z * np.sqrt(v1 / n1 + v0 / n0)

    final = stats_at(n)
    if final is None:
        raise AttackError("a partition has fewer than 2 traces")
    diff, half = final
    if target_cycle is None:
        target_cycle = int(np.argmax(np.abs(diff) - half))
    evo_d, evo_h, crossing = [], [], None
    for cp in checkpoints:
        st = stats_at(int(cp))
        if st is None:
            evo_d.append(0.0)
            evo_h.append(np.inf)
            continue
        evo_d.append(st[0][target_cycle])
        evo_h.append(st[1][target_cycle])
        if crossing is None and abs(st[0][target_cycle]) > st[1][target_cycle]:
            crossing = int(cp)
    return DomResult(
        diff=diff, halfwidth=half, checkpoints=checkpoints,
        evolution_diff=np.asarray(evo_d), evolution_halfwidth=np.asarray(evo_h),
        target_cycle=int(target_cycle), crossing_n=crossing, level=level,
    )


# ---------------------------------------------------------------------------
# full recovery sweeps


@dataclass
class GroupRecovery:
    register: int
    best_guess: int
    rho_peak: float
    crossed: bool
    # The additive inverse of the best guess correlates identically up to
    # sign, so every crossed group is recovered only up to inversion.
    ambiguous_inverse: bool = True


@dataclass
class WeightRecovery:
    stage: int
    groups: list
    n_traces: int
    threshold: float
    resolved_bits: object = None     # (pixels,) weight bits, set when a
    global_flip_ambiguous: bool = True  # second stage resolved relative signs

    @property
    def recovered(self) -> bool:
        return all(g.crossed for g in self.groups)


def recover_weights(samples: np.ndarray, images: np.ndarray, stage: int,
                    schedule=(2,), node: int = 0, level: float = 0.9999,
                    chunk: int = 4096) -> WeightRecovery:
    """Sweep every complete register group of ``stage`` with CPA, reusing
    the same traces; optionally disambiguate adjacent groups' relative
    signs with the next stage listed in ``schedule``.
    """
    if stage > MAX_ATTACK_STAGE:
        raise AttackError(f"guess space for stage {stage} is impractical")
    n, T = samples.shape
    in_dim = images.shape[1]
    group = 1 << stage
    n_groups = in_dim // group
    if n_groups == 0:
        raise AttackError("no complete register group at this stage")
    spaces = [HypothesisSpace(stage, g, node) for g in range(n_groups)]
    preds = np.concatenate([prediction_matrix(sp, images) for sp in spaces], axis=0)
    acc = PearsonAccumulator.zeros(preds.shape[0], T)
    for lo in range(0, n, chunk):
        acc.update(preds[:, lo : lo + chunk], samples[lo : lo + chunk])
    rho, _ = acc.correlations()
    rho = rho.reshape(n_groups, spaces[0].n_guesses, T)
    thr = confidence_threshold(n, level)
    groups = []
    for g in range(n_groups):
        peak = np.abs(rho[g]).max(axis=1)
        best = int(np.argmax(peak))
        groups.append(GroupRecovery(register=g, best_guess=best,
                                    rho_peak=float(peak[best]),
                                    crossed=bool(peak[best] > thr)))
    rec = WeightRecovery(stage=stage, groups=groups, n_traces=n, threshold=thr)
    next_stages = [s for s in schedule if s == stage + 1]
    if next_stages and all(g.crossed for g in groups):
        rec.resolved_bits, ok = _resolve_signs(samples, images, stage, groups,
                                               level, chunk)
        rec.global_flip_ambiguous = True
        if not ok:
            rec.resolved_bits = None
    return rec


def _resolve_signs(samples, images, stage, groups, level, chunk):
    """Stage s+1 CPA over the four relative-sign combinations of each
    adjacent group pair; fixes all signs up to one global flip."""
    images = np.asarray(images, dtype=np.int64)
    n = samples.shape[0]
    group = 1 << stage
    thr = confidence_threshold(n, level)
    n_pairs = len(groups) // 2
    rel = np.zeros(n_pairs, dtype=np.int64)
    ok = True
    signs_of = lambda guess: (((guess >> np.arange(group)) & 1) * 2 - 1)
    for p in range(n_pairs):
        ga, gb = groups[2 * p], groups[2 * p + 1]
        va = images[:, 2 * p * group : (2 * p + 1) * group] @ signs_of(ga.best_guess)
        vb = images[:, (2 * p + 1) * group : (2 * p + 2) * group] @ signs_of(gb.best_guess)
        mask = (1 << (STAGE_BITS + stage + 1)) - 1
        preds = np.stack([
            np.bitwise_count((va + vb) & mask),
            np.bitwise_count((va - vb) & mask),
            np.bitwise_count((-va + vb) & mask),
            np.bitwise_count((-va - vb) & mask),
        ]).astype(np.float64)
        acc = PearsonAccumulator.zeros(4, samples.shape[1])
        for lo in range(0, n, chunk):
            acc.update(preds[:, lo : lo + chunk], samples[lo : lo + chunk])
        rho, _ = acc.correlations()
        peak = np.abs(rho).max(axis=1)
        best = int(np.argmax(peak))
        if peak[best] <= thr:
            ok = False
        rel[p] = best
    # Chain the relative signs into absolute ones (global flip remains).
    bits = []
    for p in range(n_pairs):
        flip_a = (rel[p] >> 1) & 1
        flip_b = rel[p] & 1
        for g, flip in ((groups[2 * p], flip_a), (groups[2 * p + 1], flip_b)):
            guess = g.best_guess ^ ((1 << group) - 1 if flip else 0)
            bits.extend(((guess >> j) & 1) for j in range(group))
    return np.asarray(bits, dtype=np.uint8), ok


@dataclass
class BiasRecovery:
    candidates: np.ndarray
    best: object
    rho_peak: float
    crossed: bool
    interval: object = None  # (lo, hi) candidate range consistent at threshold


def recover_bias(samples: np.ndarray, images: np.ndarray, weights_row: np.ndarray,
                 candidates, mode: str = "cpa", width: int = 19,
                 level: float = 0.9999, chunk: int = 4096) -> BiasRecovery:
    """CPA over bias candidates on the bias-add register, or correlate the
    activation sign.  Assumes the node's weights are already recovered."""
    candidates = np.asarray(candidates, dtype=np.int64)
    images = np.asarray(images, dtype=np.int64)
    signs = weights_row.astype(np.int64) * 2 - 1
    x = images @ signs
    mask = (1 << width) - 1
    if mode == "cpa":
        preds = np.bitwise_count((x[None, :] + candidates[:, None]) & mask).astype(np.float64)
    elif mode == "sign":
        preds = (x[None, :] + candidates[:, None] > 0).astype(np.float64)
    else:
        raise AttackError(f"unknown bias recovery mode {mode!r}")
    n = samples.shape[0]
    acc = PearsonAccumulator.zeros(len(candidates), samples.shape[1])
    for lo in range(0, n, chunk):
        acc.update(preds[:, lo : lo + chunk], samples[lo : lo + chunk])
    rho, _ = acc.correlations()
    peak = np.abs(rho).max(axis=1)
    thr = confidence_threshold(n, level)
    best_i = int(np.argmax(peak))
    crossed = bool(peak[best_i] > thr)
    interval = None
    if mode == "sign" and crossed:
        above = candidates[peak > thr]
        interval = (int(above.min()), int(above.max()))
    return BiasRecovery(
        candidates=candidates,
        best=int(candidates[best_i]) if crossed else None,
        rho_peak=float(peak[best_i]),
        crossed=crossed,
        interval=interval,
    )
