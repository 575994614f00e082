"""Closed-form rate model: singles, coincidences, accidentals, QBERs and SKR vs mu."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .distill import binary_entropy
from .sim_link import PS_PER_S, _jitter_sigmas, validate_config


class NotUnimodal(ValueError):
    pass


@dataclass
class RatePrediction:
    mu: float
    singles: dict  # registered counts/s per physical detector
    cz: float  # true Z-Z coincidences/s inside the window
    az: float  # accidental Z-Z coincidences/s
    cx: float
    ax: float
    qber_z: float
    qber_x: float
    raw_rate: float  # sifted Z-Z rate, true + accidental
    secret_rate: float
    capture: float


def capture_fraction(cfg) -> float:
    """Share of a Gaussian coincidence peak inside the window."""
    sa, sb = _jitter_sigmas(cfg)
    sigma = math.hypot(sa, sb)
    if sigma == 0:
        return 1.0
    return math.erf(cfg.source.window_ps / 2 / (sigma * math.sqrt(2)))


def predict(mu: float, cfg, accidentals: bool = True, dead_time: bool = True) -> RatePrediction:
    """Rates at pair probability ``mu`` per window for the configuration.

    Dead time enters as the non-paralyzable live fraction 1/(1 + r*tau_d)
    of each physical detector. Accidentals use the flat-background product
    s_A*s_B*w over every contributing detector pair; this term already
    contains the multi-pair contribution, so no separate one is added.
    """
    d = validate_config(cfg)
    src, det = cfg.source, cfg.detectors
    tr = d.transmittance
    eta = det.efficiency
    R = mu / src.window_ps * PS_PER_S
    w = src.window_ps / PS_PER_S
    dark = det.dark_rate_hz
    pz, px = src.basis_prob_z, src.basis_prob_x
    passive = src.alice_z_scheme == "passive"
    incident = {
        "BZ1": R * pz / 2 * tr["BZ1"] * eta,
        "BZ2": R * pz / 2 * tr["BZ2"] * eta,
        "BX1": R * px / 2 * tr["BX1"] * eta,
        "BX2": R * px / 2 * tr["BX2"] * eta,
        "AX1": R * px / 2 * tr["AX1"] * eta,
        "AX2": R * px / 2 * tr["AX2"] * eta,
    }
    if passive:
        incident["AZa"] = incident["AZb"] = R * pz / 2 * tr["AZ"] * eta
    else:
        incident["AZ"] = R * pz * tr["AZ"] * eta
    tau_d = det.dead_time_ps / PS_PER_S
    live = {}
    singles = {}
    for k, r in incident.items():
        r_tot = r + dark
        live[k] = 1.0 / (1.0 + r_tot * tau_d) if dead_time else 1.0
        singles[k] = r_tot * live[k]
    cap = capture_fraction(cfg)
    e = src.intrinsic_qber_z

    # Z-Z: conditional on both photons in Z; Bob's arm sets the bit.
    if passive:
        alice_z = [("AZa", 0), ("AZb", 1)]
        # Only equal arm choices land at zero delay.
        cz = sum(
            R * (pz / 2 * tr["AZ"] * eta * live[a]) * (pz / 2 * tr[b] * eta * live[b]) * cap
            for a, arm in alice_z
            for b in (("BZ1", "BZ2")[arm],)
        )
        alice_logical_rate = singles["AZa"] + singles["AZb"]
    else:
        cz = sum(
            R * (pz * tr["AZ"] * eta * live["AZ"]) * (pz / 2 * tr[b] * eta * live[b]) * cap
            for b in ("BZ1", "BZ2")
        )
        # Each Alice Z detection appears on both logical channels.
        alice_logical_rate = 2 * singles["AZ"]
    az = alice_logical_rate * (singles["BZ1"] + singles["BZ2"]) * w if accidentals else 0.0

    # X-X central peak with outcome table p_ij; satellites sit at +-tau.
    c = d.visibility_eff * math.cos(src.phase_a_rad + src.phase_b_rad)
    cx = ex = ax = axe = 0.0
    for i, a in enumerate(("AX1", "AX2")):
        for j, b in enumerate(("BX1", "BX2")):
            pij = (1 + (1 if i == j else -1) * c) / 4
            ci = R * px * px / 2 * pij * tr[a] * tr[b] * eta * eta * live[a] * live[b] * cap
            acc = singles[a] * singles[b] * w if accidentals else 0.0
            cx += ci
            ax += acc
            if i != j:
                ex += ci
                axe += acc
    qz = (az / 2 + e * cz) / (cz + az) if cz + az > 0 else 0.5
    qx = (ex + axe) / (cx + ax) if cx + ax > 0 else 0.5
    raw = cz + az
    frac = 1 - binary_entropy(min(qx, 0.5)) - cfg.distillation.f_ec * binary_entropy(min(qz, 0.5))
    if qz > cfg.distillation.qber_abort:
        frac = 0.0
    return RatePrediction(mu, singles, cz, az, cx, ax, qz, qx, raw, raw * max(0.0, frac), cap)


def _check_unimodal(values: np.ndarray, rtol: float = 1e-9) -> None:
    k = int(np.argmax(values))
    tol = rtol * max(float(np.max(values)), 1e-300)
    if np.any(np.diff(values[: k + 1]) < -tol) or np.any(np.diff(values[k:]) > tol):
        raise NotUnimodal("secret rate is not unimodal over the search range")


def optimize_mu(cfg, mu_range=(1e-4, 0.5), rel_tol: float = 1e-3, **kw) -> tuple[float, RatePrediction]:
    """Golden-section search for the SKR-maximizing mu (in log mu)."""
    lo, hi = math.log(mu_range[0]), math.log(mu_range[1])
    grid = np.exp(np.linspace(lo, hi, 65))
    skr = np.array([predict(m, cfg, **kw).secret_rate for m in grid])
    _check_unimodal(skr)
    f = lambda x: predict(math.exp(x), cfg, **kw).secret_rate
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    # Interval in log space, so its width is the relative tolerance on mu.
    while b - a > rel_tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    best = max((a, b, (a + b) / 2), key=f)
    mu = math.exp(best)
    return mu, predict(mu, cfg, **kw)


def export_scan(cfg, mu_grid, path=None, header_comment: str | None = None) -> str:
    """CSV of (mu, skr, qber_z, qber_x) for every grid point."""
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["mu", "skr", "qber_z", "qber_x"])
    for mu in mu_grid:
        p = predict(float(mu), cfg)
        wr.writerow([f"{mu:.6g}", f"{p.secret_rate:.6g}", f"{p.qber_z:.6g}", f"{p.qber_x:.6g}"])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
