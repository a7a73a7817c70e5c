"""LF glottal-flow pulse generation with exact closure-instant annotations.

One normalized period of the flow derivative is

  open phase   (0 <= t <= te):  E0 * exp(a*t) * sin(pi*t/tp)
  return phase (te < t <= 1):   -(Ee/(eps*ta)) * (exp(-eps*(t-te)) - exp(-eps*(1-te)))

with E0 fixed so the open phase reaches -Ee at te, eps solved from
eps*ta = 1 - exp(-eps*(1-te)), and a solved so the total area over the
period vanishes (the flow returns to baseline).  The minimum of the
derivative at te is the glottal closure instant.
"""

from dataclasses import dataclass

import numpy as np

from .dsp import AudioBuffer

RD_MIN = 0.3
RD_MAX = 2.7

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


class SolverError(RuntimeError):
    """Raised when the eps/a Newton solves fail to converge."""


class DegenerateShapeError(ValueError):
    """Raised when the Rd regression produces an unusable pulse shape."""


@dataclass
class LfCoeffs:
    rd: float
    ra: float
    rk: float
    rg: float
    tp: float
    te: float
    ta: float
    epsilon: float
    a: float


@dataclass
class PulseTrainSpec:
    """Frame tracks (5 ms hop) describing a pulse train."""

    f0_track: np.ndarray       # Hz per frame
    rd_track: np.ndarray
    voicing: np.ndarray        # bool per frame
    ee: float = 1.0
    duration: float = None     # seconds; defaults to n_frames * hop
    frame_hop: float = 0.005

    def __post_init__(self):
        self.f0_track = np.asarray(self.f0_track, dtype=np.float64)
        self.rd_track = np.asarray(self.rd_track, dtype=np.float64)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if not (len(self.f0_track) == len(self.rd_track) == len(self.voicing)):
            raise ValueError("f0, Rd and voicing tracks must share length")
        if self.duration is None:
            self.duration = len(self.f0_track) * self.frame_hop
        if np.any(self.voicing & (self.f0_track <= 0)):
            raise ValueError("voiced frames require f0 > 0")

    @property
    def n_frames(self):
        return len(self.f0_track)


@dataclass
class GciList:
    """Strictly increasing closure-instant times in seconds."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("GCI times must be strictly increasing")

    def __len__(self):
        return len(self.times)


def _newton_bisect(f, x0, lo, hi, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Scalar root find: Newton with numeric derivative, bisection fallback.

    `lo`/`hi` must bracket a sign change for the fallback to engage.
    """
    x = x0
    for _ in range(max_iter):
        fx = f(x)
        if abs(fx) < tol:
            return x
        h = 1e-7 * (1.0 + abs(x))
        dfx = (f(x + h) - f(x - h)) / (2 * h)
        if dfx == 0 or not np.isfinite(dfx):
            break
        step = fx / dfx
        x_new = x - step
        if not np.isfinite(x_new) or not (lo - abs(lo) - 1e3 < x_new < hi + abs(hi) + 1e3):
            break
        if abs(step) < tol * (1.0 + abs(x)):
            return x_new
        x = x_new
    # bisection fallback
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise SolverError("root not bracketed and Newton did not converge")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < tol or (hi - lo) < tol:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _solve_epsilon(ta, te):
    """eps from eps*ta = 1 - exp(-eps*(1-te)) (nontrivial positive root)."""
    tb = 1.0 - te
    if ta <= 0 or tb <= 0:
        raise DegenerateShapeError(f"return phase undefined: ta={ta}, 1-te={tb}")

    def f(eps):
        return eps * ta - 1.0 + np.exp(-eps * tb)

    return _newton_bisect(f, 1.0 / ta, 1e-9, 1e7 / ta)


def _return_phase_area(ee, epsilon, ta, te):
    tb = 1.0 - te
    e_tb = np.exp(-epsilon * tb)
    return -(ee / (epsilon * ta)) * ((1.0 - e_tb) / epsilon - tb * e_tb)


def _open_phase_area(a, te, tp, ee):
    """Integral of E0*exp(a t)*sin(pi t/tp) over [0, te]."""
    w = np.pi / tp
    sin_te = np.sin(w * te)
    e0 = -ee / (np.exp(a * te) * sin_te)
    integral = (np.exp(a * te) * (a * np.sin(w * te) - w * np.cos(w * te)) + w) / (a * a + w * w)
    return e0 * integral


def _solve_a(te, tp, ta, epsilon, ee=1.0):
    """a such that the period area (open + return phase) vanishes."""
    a_ret = _return_phase_area(ee, epsilon, ta, te)

    def f(a):
        return _open_phase_area(a, te, tp, ee) + a_ret

    return _newton_bisect(f, 1.0, -2e3, 2e3)


def rd_to_lf_coeffs(rd):
    """Map the one-parameter Rd shape value to full LF coefficients.

    Uses the standard regression Ra = (-1 + 4.8 Rd)/100 and
    Rk = (22.4 + 11.8 Rd)/100, with Rg recovered from the Rd definition
    Rd = (1/0.11)(0.5 + 1.2 Rk)(Rk/(4 Rg) + Ra).
    """
    rd = float(rd)
    if not RD_MIN <= rd <= RD_MAX:
        raise ValueError(f"Rd={rd} outside supported range [{RD_MIN}, {RD_MAX}]")
    ra = (-1.0 + 4.8 * rd) / 100.0
    rk = (22.4 + 11.8 * rd) / 100.0
    denom = 0.11 * rd / (0.5 + 1.2 * rk) - ra
    if denom <= 0:
        raise DegenerateShapeError(f"Rd={rd}: regression denominator {denom} <= 0")
    rg = rk / (4.0 * denom)
    tp = 1.0 / (2.0 * rg)
    te = tp * (1.0 + rk)
    ta = ra
    if not 0.0 < tp < te < 1.0:
        raise DegenerateShapeError(f"Rd={rd}: invalid timing tp={tp}, te={te}")
    epsilon = _solve_epsilon(ta, te)
    a = _solve_a(te, tp, ta, epsilon)
    return LfCoeffs(rd=rd, ra=ra, rk=rk, rg=rg, tp=tp, te=te, ta=ta,
                    epsilon=epsilon, a=a)


def lf_waveform(coeffs, t_norm, ee=1.0):
    """Flow-derivative values at normalized times t in [0, 1)."""
    t = np.asarray(t_norm, dtype=np.float64)
    w = np.pi / coeffs.tp
    e0 = -ee / (np.exp(coeffs.a * coeffs.te) * np.sin(w * coeffs.te))
    open_phase = e0 * np.exp(coeffs.a * t) * np.sin(w * t)
    tb = 1.0 - coeffs.te
    e_tb = np.exp(-coeffs.epsilon * tb)
    ret = -(ee / (coeffs.epsilon * coeffs.ta)) * (
        np.exp(-coeffs.epsilon * (t - coeffs.te)) - e_tb)
    return np.where(t <= coeffs.te, open_phase, ret)


def lf_pulse_derivative(coeffs, t0, ee, sample_rate):
    """Sample one period of the glottal flow derivative.

    Sample i sits at time i / sample_rate; the waveform minimum (-ee)
    falls at te * t0.
    """
    n = int(round(t0 * sample_rate))
    if n < 8:
        raise ValueError(f"period too short: {n} samples (need >= 8)")
    t = np.arange(n) / (t0 * sample_rate)
    p = lf_waveform(coeffs, t, ee=ee)
    # The continuous-time period integrates to ~0 but the sampled sum
    # carries an O(1e-2 ee) discretization residue; integrating a pulse
    # train would amplify that residue into a baseline wander larger than
    # the flow pulses themselves.  Spread the residue evenly over the
    # period (an invisible <1e-3 ee per-sample shift) so the sampled
    # pulse also has zero net area.
    return p - p.sum() / n


def flow_from_derivative(deriv, sample_rate, leak=0.999):
    """Leaky running integral of the flow derivative.

    Integration uses per-millisecond time units so flow amplitudes stay
    near unity for typical speech parameters; the leak bounds drift.
    """
    from scipy.signal import lfilter
    scaled = np.asarray(deriv, dtype=np.float64) * (1000.0 / sample_rate)
    return lfilter([1.0], [1.0, -leak], scaled)


def _frame_at(t, hop, n_frames):
    return min(int(t / hop), n_frames - 1)


def render_pulse_train(spec, sample_rate, jitter_pct=0.0, shimmer_pct=0.0,
                       shape_morph=0.0, perturb_seed=0):
    """Render a pulse train to (flow derivative, GCI list, integrated flow).

    Pulses are anchored at their closure instants: consecutive GCIs are
    separated by the local fundamental period (perturbed by jitter when
    requested), and each pulse's onset is its GCI minus te * T0, which
    reduces to sequential onset placement while the tracks are constant.
    Unvoiced frames are forced to zero.
    """
    n_samples = int(round(spec.duration * sample_rate))
    deriv = np.zeros(n_samples)
    gci_times = []
    hop = spec.frame_hop
    n_frames = spec.n_frames
    rng = np.random.default_rng(perturb_seed)
    coeff_cache = {}

    def coeffs_for(rd):
        key = round(rd, 6)
        if key not in coeff_cache:
            coeff_cache[key] = rd_to_lf_coeffs(key)
        return coeff_cache[key]

    def local(t):
        fr = _frame_at(t, hop, n_frames)
        return fr, spec.f0_track[fr], spec.rd_track[fr], spec.voicing[fr]

    def jitter_factor():
        if not jitter_pct:
            return 1.0
        return 1.0 + float(np.clip(rng.standard_normal() * jitter_pct / 100.0, -0.4, 0.4))

    def shimmer_factor():
        if not shimmer_pct:
            return 1.0
        return max(1.0 + float(rng.standard_normal()) * shimmer_pct / 100.0, 0.05)

    def frame_is_voiced(fr):
        return bool(spec.voicing[fr]) and spec.f0_track[fr] > 0

    t = 0.0
    anchor = None  # time of the next closure instant
    while True:
        if anchor is None:
            if t >= spec.duration:
                break
            fr = _frame_at(t, hop, n_frames)
            if not frame_is_voiced(fr):
                # integer scan to the next voiced frame (float stepping can
                # stall on frame boundaries)
                fr += 1
                while fr < n_frames and not frame_is_voiced(fr):
                    fr += 1
                if fr >= n_frames:
                    break
                t = fr * hop
            fr, f0, rd, voiced = local(t)
            # first pulse of a voiced run starts at the run's onset
            anchor = t + coeffs_for(rd).te / f0
        if anchor >= spec.duration:
            break
        fr, f0, rd, voiced = local(anchor)
        if not voiced or f0 <= 0:
            t = (fr + 1) * hop
            anchor = None
            continue
        t0 = jitter_factor() / f0
        coeffs = coeffs_for(rd)
        onset = anchor - coeffs.te * t0
        ee = spec.ee * shimmer_factor()
        i0 = max(int(np.ceil(onset * sample_rate)), 0)
        i1 = min(int(np.ceil((onset + t0) * sample_rate)), n_samples)
        if i1 > i0:
            tt = (np.arange(i0, i1) / sample_rate - onset) / t0
            pulse = lf_waveform(coeffs, np.clip(tt, 0.0, 1.0), ee=ee)
            if shape_morph > 0.0:
                pulse = _morph_return_phase(pulse, shape_morph)
            deriv[i0:i1] += pulse
        gci_times.append(anchor)
        # consecutive closures are one (jittered) local period apart
        anchor = anchor + t0
    # zero out unvoiced frames
    for fr in range(n_frames):
        if not spec.voicing[fr]:
            a = int(round(fr * hop * sample_rate))
            b = int(round((fr + 1) * hop * sample_rate))
            deriv[a:min(b, n_samples)] = 0.0
    flow = flow_from_derivative(deriv, sample_rate)
    return (AudioBuffer(deriv, sample_rate),
            GciList(np.asarray(gci_times)),
            AudioBuffer(flow, sample_rate))


def _morph_return_phase(pulse, morph):
    """One-sided exponential smoothing of the samples after the minimum.

    Moves the pulse away from the LF family while keeping the location of
    the minimum (the closure instant) intact.
    """
    i_min = int(np.argmin(pulse))
    if i_min >= len(pulse) - 2:
        return pulse
    beta = 1.0 / (1.0 + 4.0 * morph)
    out = pulse.copy()
    state = pulse[i_min]
    for i in range(i_min + 1, len(pulse)):
        state = (1.0 - beta) * state + beta * pulse[i]
        out[i] = (1.0 - morph) * pulse[i] + morph * state
    return out
