"""PK-PD tumour growth simulator with biased treatment assignment.

Gompertz-style volume growth with a chemotherapy concentration that decays
geometrically by its half-life and a linear-quadratic radiotherapy kill.
Assignment probability for each therapy follows the recent mean tumour
diameter through a sigmoid whose slope is the bias knob gamma. Ground-truth
counterfactuals re-run each transition under all treatment combinations from
identical state and noise.

The growth/kill constants here are desk-scale stand-ins chosen to produce
plausible dynamics; they are configuration, not measured values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, TimeStep, Trajectory
from .groundtruth import GroundTruthTable, all_masks

VOLUME_FLOOR = 1e-3  # cm^3; a volume driven to zero clamps here ("recovered")


class TumourError(ValueError):
    pass


@dataclass
class TumourParams:
    rho: float = 0.045             # base Gompertz growth rate per step
    rho_spread: float = 0.5        # per-patient rate drawn from rho * U(1 +- spread); latent
    k_cap: float = 14137.2         # carrying capacity, volume of a 30 cm sphere (cm^3)
    beta_c: float = 0.13           # chemo cell-kill per unit concentration
    alpha_r: float = 0.055         # radio linear kill per Gy
    beta_r: float = 0.0055         # radio quadratic kill per Gy^2 (alpha/beta = 10)
    chemo_half_life: float = 2.0   # steps
    chemo_dose: float = 1.0        # base concentration added per assigned step
    radio_dose: float = 2.0        # base Gy per assigned step
    dose_jitter: float = 0.25      # prescribed intensity varies in base * U(1 +- jitter)
    noise_std: float = 0.02
    gamma_c: float = 5.0
    gamma_r: float = 5.0
    obs_noise_std: float = 0.08    # per-reading multiplicative noise on the observed diameter
    obs_scale_spread: float = 0.2  # per-patient calibration factor U(1 +- spread); never observed
    d_thresh: float = 5.0          # diameter threshold in the assignment sigmoid (cm)
    d_max: float = 13.0            # reference diameter scale (cm)
    window: int = 3                # steps in the recent-mean-diameter window
    diam0_range: tuple[float, float] = (1.5, 5.0)
    steps: int = 30
    patients: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.rho <= 0 or self.k_cap <= 0:
            raise TumourError("growth rate and carrying capacity must be positive")
        if min(self.beta_c, self.alpha_r, self.beta_r) < 0:
            raise TumourError("kill coefficients must be nonnegative")
        if self.gamma_c < 0 or self.gamma_r < 0:
            raise TumourError("assignment bias gammas must be nonnegative")
        if self.steps < 2 or self.patients < 1:
            raise TumourError("need steps >= 2 and patients >= 1")


def diameter(volume):
    """Spherical diameter from volume: d = (6 V / pi)^(1/3)."""
    return np.cbrt(6.0 * np.asarray(volume) / np.pi)


def volume_from_diameter(d):
    return np.pi * np.asarray(d) ** 3 / 6.0


def chemo_decay(params: TumourParams) -> float:
    return 0.5 ** (1.0 / params.chemo_half_life)


def tumour_transition(volume, concentration, radio_gy, params: TumourParams, noise, rho=None):
    """One volume update; treatment effects enter additively in the rate."""
    rho = params.rho if rho is None else rho
    growth = rho * np.log(params.k_cap / volume)
    kill = (params.beta_c * concentration
            + params.alpha_r * radio_gy + params.beta_r * radio_gy ** 2)
    return volume * (1.0 + growth - kill + noise)


def assignment_probability(mean_diam, gamma: float, params: TumourParams):
    """sigmoid(gamma / d_max * (recent mean diameter - threshold))."""
    z = gamma / params.d_max * (np.asarray(mean_diam) - params.d_thresh)
    return 1.0 / (1.0 + np.exp(-z))


def simulate_tumour(params: TumourParams) -> tuple[Dataset, GroundTruthTable]:
    """Simulate patients and the exact potential-outcome table.

    Covariates are (diameter, pre-dose chemo concentration). Features are the
    prescribed dose intensities per therapy, drawn exogenously every step and
    applied only when the therapy is assigned; the outcome is tumour volume.
    """
    rng = np.random.default_rng(np.random.SeedSequence(params.seed))
    n, t_len = params.patients, params.steps
    decay = chemo_decay(params)

    diam0 = rng.uniform(*params.diam0_range, size=n)
    rho_i = params.rho * rng.uniform(1.0 - params.rho_spread, 1.0 + params.rho_spread, size=n)
    base = np.array([params.chemo_dose, params.radio_dose])
    vdose = base * rng.uniform(1.0 - params.dose_jitter, 1.0 + params.dose_jitter,
                               size=(n, t_len, 2))
    vol = np.zeros((n, t_len))
    conc_pre = np.zeros((n, t_len))
    bits = np.zeros((n, t_len, 2), dtype=np.int64)
    noise = rng.normal(0.0, params.noise_std, size=(n, t_len - 1))
    vol[:, 0] = volume_from_diameter(diam0)

    length = np.full(n, t_len, dtype=np.int64)
    status = np.array(["ok"] * n, dtype=object)
    active = np.ones(n, dtype=bool)

    diam_hist = np.zeros((n, t_len))
    for t in range(t_len):
        diam_hist[:, t] = diameter(vol[:, t])
        lo = max(0, t - params.window + 1)
        dbar = diam_hist[:, lo: t + 1].mean(axis=1)
        p_c = assignment_probability(dbar, params.gamma_c, params)
        p_r = assignment_probability(dbar, params.gamma_r, params)
        draws = rng.random(size=(n, 2))
        bits[:, t, 0] = (draws[:, 0] < p_c) & active
        bits[:, t, 1] = (draws[:, 1] < p_r) & active
        if t == t_len - 1:
            break
        conc = conc_pre[:, t] + vdose[:, t, 0] * bits[:, t, 0]
        gy = vdose[:, t, 1] * bits[:, t, 1]
        nxt = tumour_transition(vol[:, t], conc, gy, params, noise[:, t], rho=rho_i)
        recovered = active & (nxt <= VOLUME_FLOOR)
        status[recovered] = "recovered"
        nxt = np.maximum(nxt, VOLUME_FLOOR)
        terminal = active & (nxt >= 1.05 * params.k_cap)
        newly_terminal = terminal & (length == t_len)
        # truncate before the offending step; keep at least two steps
        length[newly_terminal] = np.maximum(t + 1, 2)
        status[newly_terminal] = "terminal"
        clamp = newly_terminal & (length == 2) & (t + 1 < 2)
        nxt[clamp] = 1.05 * params.k_cap
        active &= ~newly_terminal
        vol[:, t + 1] = np.where(active | clamp, nxt, vol[:, t])
        conc_pre[:, t + 1] = decay * conc

    obs_noise = rng.normal(0.0, params.obs_noise_std, size=(n, t_len))
    obs_scale = rng.uniform(1.0 - params.obs_scale_spread, 1.0 + params.obs_scale_spread, size=n)
    trajectories = []
    table = GroundTruthTable(
        k=2, kind="tumour",
        meta={k: v for k, v in asdict(params).items() if k not in ("seed",)},
    )
    masks = all_masks(2)
    for i in range(n):
        eid = f"p{i:05d}"
        t_i = int(length[i])
        steps = []
        for t in range(t_i):
            # the covariate carries a miscalibrated, noisy diameter reading;
            # assignment and dynamics follow the true latent diameter
            x = np.array([diam_hist[i, t] * obs_scale[i] * (1.0 + obs_noise[i, t]),
                          conc_pre[i, t]])
            steps.append(TimeStep(x=x, v=vdose[i, t][None, :].copy(), a=bits[i, t].copy(),
                                  y=float(vol[i, t])))
        trajectories.append(Trajectory(entity_id=eid, steps=steps))
        for t in range(t_i - 1):
            for mask in masks:
                mc, mr = int(mask[0]), int(mask[1])
                conc = conc_pre[i, t] + vdose[i, t, 0] * mc
                gy = vdose[i, t, 1] * mr
                y_cf = tumour_transition(vol[i, t], conc, gy, params, noise[i, t], rho=rho_i[i])
                table.outcomes[(eid, t + 1, mask)] = float(max(y_cf, VOLUME_FLOOR))
        table.entity_state[eid] = {
            "noise": noise[i, : max(t_i - 1, 0)].copy(),
            "conc_pre": conc_pre[i, :t_i].copy(),
            "y": vol[i, :t_i].copy(),
            "vplan": vdose[i, :t_i].copy(),
            "rho": float(rho_i[i]),
        }
        table.status[eid] = str(status[i])
    return Dataset(trajectories=trajectories), table


def rerun_tumour_plan(meta: dict, state: dict, t_base: int, plan_bits: np.ndarray) -> np.ndarray:
    """Counterfactual volumes from the saved state under a treatment plan."""
    params = TumourParams(**{k: v for k, v in meta.items()
                             if k in TumourParams.__dataclass_fields__},
                          seed=0)
    decay = chemo_decay(params)
    vol = float(np.asarray(state["y"])[t_base - 1])
    cp = float(np.asarray(state["conc_pre"])[t_base - 1])
    rho = float(state.get("rho", params.rho))
    noise = np.asarray(state["noise"])
    vplan = np.asarray(state["vplan"])
    out = np.zeros(plan_bits.shape[0])
    for j in range(plan_bits.shape[0]):
        idx = t_base - 1 + j
        conc = cp + vplan[idx, 0] * plan_bits[j, 0]
        gy = vplan[idx, 1] * plan_bits[j, 1]
        vol = max(tumour_transition(vol, conc, gy, params, noise[idx], rho=rho), VOLUME_FLOOR)
        out[j] = vol
        cp = decay * conc
    return out
