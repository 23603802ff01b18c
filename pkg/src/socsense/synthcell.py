"""Deterministic synthetic battery cycling data with known SOC ground truth.

A first-order equivalent circuit (OCV table, series resistance, one RC pair)
drives the electrical channels; auxiliary channels (expansion, surface and
internal temperature, force, optical intensity/wavelength, electrode
potentials, gas pressure) are smooth functions of the true SOC and current
history, so they genuinely carry state information. Gaussian sensor noise
is seeded per channel; the SOC label integrates the true current exactly.

None of this claims electrochemical fidelity; it exists to provide
controllable desk-scale ground truth for the estimation pipeline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ProtocolError, SchemaError
from .signals import SignalMatrix, ema, write_csv

SECONDS_PER_HOUR = 3600.0

# piecewise-linear maps over SOC: (soc knots, values)
# mid-range plateau is nearly flat so voltage alone pins SOC only near the ends
_DEFAULT_OCV = (
    (0.00, 0.03, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 1.00),
    (2.50, 3.00, 3.45, 3.55, 3.618, 3.625, 3.631, 3.637, 3.645, 3.76, 3.95, 4.06, 4.20),
)
_DEFAULT_EXPANSION = (
    (0.0, 0.15, 0.30, 0.50, 0.70, 0.85, 1.00),
    (0.0, 7.0, 16.0, 28.0, 42.0, 51.0, 60.0),
)
# graphite-like anode potential vs Li (decreasing, staged)
_DEFAULT_ANODE = (
    (0.0, 0.05, 0.12, 0.25, 0.50, 0.55, 0.85, 1.00),
    (0.60, 0.32, 0.22, 0.185, 0.125, 0.118, 0.095, 0.060),
)
_DEFAULT_INTENSITY = (
    (0.0, 0.2, 0.5, 0.8, 1.0),
    (1.00, 0.90, 0.76, 0.62, 0.55),
)
_DEFAULT_WAVELENGTH = (
    (0.0, 0.3, 0.6, 1.0),
    (615.0, 609.0, 603.0, 597.0),
)

DEFAULT_NOISE_SIGMA = {
    "V": 0.002, "I": 0.010, "T": 0.05, "E": 0.5,
    "Phi": 0.003, "Lambda": 0.12, "Psi": 0.002, "Eta": 0.001,
    "F": 0.8, "T_in": 0.05, "P": 0.05,
}


@dataclass(frozen=True)
class CellConfig:
    capacity_ah: float = 5.0
    ocv_table: tuple = _DEFAULT_OCV
    r0_ohm: float = 0.010
    # slow RC pair (tau ~ 300 s, well beyond a 50 s window) so polarization
    # is not recoverable from current history alone
    r1_ohm: float = 0.020
    c1_farad: float = 15000.0
    expansion_table: tuple = _DEFAULT_EXPANSION
    expansion_drift_um_per_cycle: float = 0.1
    thermal_mass_j_per_k: float = 300.0
    heat_transfer_w_per_k: float = 0.6
    ambient_mean_c: float = 25.0
    ambient_amplitude_c: float = 1.5
    ambient_period_s: float = 21600.0
    anode_table: tuple = _DEFAULT_ANODE
    anode_r_ohm: float = 0.003
    intensity_table: tuple = _DEFAULT_INTENSITY
    wavelength_table: tuple = _DEFAULT_WAVELENGTH
    optical_lag_s: float = 120.0
    force_offset_n: float = 20.0
    force_n_per_um: float = 1.5
    internal_temp_tau_s: float = 120.0
    internal_temp_k_per_w: float = 1.5
    pressure_base_kpa: float = 101.3
    pressure_per_k: float = 0.8
    pressure_per_soc: float = 2.0
    noise_sigma: dict = field(default_factory=lambda: dict(DEFAULT_NOISE_SIGMA))
    initial_soc: float = 0.5
    time_step_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.capacity_ah <= 0:
            raise ValueError("capacity_ah must be positive")
        soc, v = self.ocv_table
        if np.any(np.diff(v) <= 0) or np.any(np.diff(soc) <= 0):
            raise ValueError("OCV table must be strictly increasing")
        if any(s < 0 for s in self.noise_sigma.values()):
            raise ValueError("noise sigmas must be non-negative")

    def ocv(self, soc: float) -> float:
        knots, vals = self.ocv_table
        return float(np.interp(soc, knots, vals))


# --- protocol phases -------------------------------------------------------


@dataclass(frozen=True)
class CCCharge:
    c_rate: float
    v_limit: float
    label = "cc_charge"


@dataclass(frozen=True)
class CVCharge:
    voltage: float
    cutoff_c_rate: float
    max_c_rate: float = 2.0
    label = "cv_charge"


@dataclass(frozen=True)
class CCDischarge:
    c_rate: float
    v_limit: float | None = None
    duration_s: float | None = None
    label = "cc_discharge"


@dataclass(frozen=True)
class Rest:
    duration_s: float
    label = "rest"


@dataclass(frozen=True)
class DynamicDischarge:
    profile: str                  # "drive_cycle" or "dst"
    dod: float | None = None      # stop when soc <= 1 - dod
    v_limit: float | None = None  # stop when terminal voltage would drop below
    label = "discharge"


Phase = CCCharge | CVCharge | CCDischarge | Rest | DynamicDischarge


@dataclass(frozen=True)
class Protocol:
    phases: tuple[Phase, ...]

    def __post_init__(self):
        if not self.phases:
            raise ProtocolError("protocol needs at least one phase")


def load_profile(name: str) -> list[tuple[float, float]]:
    """Load a named dynamic-discharge schedule shipped with the package."""
    ref = resources.files("socsense.profiles") / f"{name}.json"
    try:
        raw = json.loads(ref.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ProtocolError(f"unknown dynamic profile '{name}'") from None
    return [(float(d), float(r)) for d, r in raw["segments"]]


class _ProfilePlayer:
    """Steps through a looping (duration, c_rate) schedule one dt at a time."""

    def __init__(self, segments: list[tuple[float, float]], dt: float):
        self.segments = segments
        self.dt = dt
        self.seg = 0
        self.left = segments[0][0]

    def next_rate(self) -> float:
        while self.left <= 0:
            self.seg = (self.seg + 1) % len(self.segments)
            self.left = self.segments[self.seg][0]
        self.left -= self.dt
        return self.segments[self.seg][1]


# --- simulation ------------------------------------------------------------


class _CellState:
    __slots__ = ("q_as", "v_rc", "temp", "t_in_rise", "throughput_as")

    def __init__(self, temp: float):
        self.q_as = 0.0          # net discharged charge, ampere-seconds
        self.v_rc = 0.0
        self.temp = temp
        self.t_in_rise = 0.0     # internal temperature rise over ambient
        self.throughput_as = 0.0


def simulate(config: CellConfig, protocol: Protocol, cycles: int = 1) -> SignalMatrix:
    """Run the protocol for the requested number of cycles at 1 Hz (or
    config.time_step_s) and return every channel plus the exact SOC label."""
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    dt = config.time_step_s
    cap_as = config.capacity_ah * SECONDS_PER_HOUR
    amb0 = _ambient(config, 0.0)
    st = _CellState(temp=amb0)

    t_list: list[float] = []
    i_list: list[float] = []
    v_list: list[float] = []
    soc_list: list[float] = []
    temp_list: list[float] = []
    t_in_list: list[float] = []
    thr_list: list[float] = []
    phase_list: list[str] = []
    cycle_list: list[int] = []

    t = 0.0

    def soc() -> float:
        return config.initial_soc - st.q_as / cap_as

    def terminal_v(i: float) -> float:
        return config.ocv(soc()) - i * config.r0_ohm - st.v_rc

    def integrate(i: float) -> None:
        nonlocal t
        st.q_as += i * dt
        st.throughput_as += abs(i) * dt
        st.v_rc += dt * (-st.v_rc / (config.r1_ohm * config.c1_farad) + i / config.c1_farad)
        heat = i * i * (config.r0_ohm + config.r1_ohm)
        amb = _ambient(config, t)
        st.temp += dt * (config.heat_transfer_w_per_k * (amb - st.temp) + heat) \
            / config.thermal_mass_j_per_k
        st.t_in_rise += dt * (config.internal_temp_k_per_w * heat - st.t_in_rise) \
            / config.internal_temp_tau_s
        t += dt

    def emit(i: float, label: str, cycle: int) -> None:
        t_list.append(t)
        i_list.append(i)
        v_list.append(terminal_v(i))
        soc_list.append(soc())
        temp_list.append(st.temp)
        t_in_list.append(_ambient(config, t) + st.t_in_rise)
        thr_list.append(st.throughput_as)
        phase_list.append(label)
        cycle_list.append(cycle)

    max_phase_steps = int(50 * SECONDS_PER_HOUR / dt)  # hard stall guard per phase

    for cycle in range(cycles):
        for phase in protocol.phases:
            steps = 0
            if isinstance(phase, CCCharge):
                i = -phase.c_rate * config.capacity_ah
                while terminal_v(i) < phase.v_limit:
                    if soc() >= 1.0 - 1e-9:
                        raise ProtocolError(
                            f"{phase.label}: voltage limit {phase.v_limit} V "
                            f"not reached before full charge"
                        )
                    emit(i, phase.label, cycle)
                    integrate(i)
                    steps += 1
                    if steps > max_phase_steps:
                        raise ProtocolError(f"{phase.label}: phase stalled")
            elif isinstance(phase, CVCharge):
                i_max = phase.max_c_rate * config.capacity_ah
                cutoff = phase.cutoff_c_rate * config.capacity_ah
                while True:
                    i_alg = (config.ocv(soc()) - st.v_rc - phase.voltage) / config.r0_ohm
                    i = float(np.clip(i_alg, -i_max, i_max))
                    if abs(i) <= cutoff and i == i_alg:
                        break
                    emit(i, phase.label, cycle)
                    integrate(i)
                    steps += 1
                    if steps > max_phase_steps:
                        raise ProtocolError(f"{phase.label}: cutoff "
                                            f"{phase.cutoff_c_rate}C never reached")
            elif isinstance(phase, Rest):
                n = int(round(phase.duration_s / dt))
                for _ in range(n):
                    emit(0.0, phase.label, cycle)
                    integrate(0.0)
            elif isinstance(phase, CCDischarge):
                i = phase.c_rate * config.capacity_ah
                n = None if phase.duration_s is None else int(round(phase.duration_s / dt))
                while True:
                    if n is not None and steps >= n:
                        break
                    if phase.v_limit is not None and terminal_v(i) <= phase.v_limit:
                        break
                    if soc() <= 1e-9:
                        if phase.v_limit is not None:
                            raise ProtocolError(
                                f"{phase.label}: voltage limit {phase.v_limit} V "
                                f"not reached before empty"
                            )
                        break
                    emit(i, phase.label, cycle)
                    integrate(i)
                    steps += 1
                    if steps > max_phase_steps:
                        raise ProtocolError(f"{phase.label}: phase stalled")
            elif isinstance(phase, DynamicDischarge):
                if phase.dod is None and phase.v_limit is None:
                    raise ProtocolError(f"{phase.label}: no termination given")
                player = _ProfilePlayer(load_profile(phase.profile), dt)
                floor = None if phase.dod is None else 1.0 - phase.dod
                while True:
                    if floor is not None and soc() <= floor:
                        break
                    i = player.next_rate() * config.capacity_ah
                    if phase.v_limit is not None and terminal_v(i) <= phase.v_limit:
                        break
                    if soc() - i * dt / cap_as <= 1e-9:
                        raise ProtocolError(f"{phase.label}: cell empty before termination")
                    emit(i, phase.label, cycle)
                    integrate(i)
                    steps += 1
                    if steps > max_phase_steps:
                        raise ProtocolError(f"{phase.label}: termination never reached")
            else:  # pragma: no cover - exhaustive over Phase
                raise ProtocolError(f"unknown phase type {type(phase).__name__}")

    if not t_list:
        raise ProtocolError("protocol produced no samples")

    times = np.asarray(t_list)
    current = np.asarray(i_list)
    voltage = np.asarray(v_list)
    soc_series = np.asarray(soc_list)
    temp = np.asarray(temp_list)
    t_in = np.asarray(t_in_list)
    throughput = np.asarray(thr_list)

    # auxiliary channels from true state
    drift = config.expansion_drift_um_per_cycle * throughput / (2.0 * cap_as)
    expansion = np.interp(soc_series, *config.expansion_table) + drift
    alpha_opt = dt / (config.optical_lag_s + dt)
    intensity = ema(np.interp(soc_series, *config.intensity_table), alpha_opt)
    wavelength = ema(np.interp(soc_series, *config.wavelength_table), alpha_opt)
    anode = np.interp(soc_series, *config.anode_table) + current * config.anode_r_ohm
    cathode = voltage + anode
    force = config.force_offset_n + config.force_n_per_um * expansion
    pressure = config.pressure_base_kpa \
        + config.pressure_per_k * (t_in - config.ambient_mean_c) \
        + config.pressure_per_soc * soc_series

    clean = {
        "I": current, "V": voltage, "E": expansion, "T": temp,
        "Phi": intensity, "Lambda": wavelength, "Psi": cathode, "Eta": anode,
        "F": force, "T_in": t_in, "P": pressure,
    }
    rng = np.random.default_rng(config.seed)
    noisy = {}
    for name in ("I", "V", "E", "T", "Phi", "Lambda", "Psi", "Eta", "F", "T_in", "P"):
        sigma = config.noise_sigma.get(name, 0.0)
        noisy[name] = clean[name] + (rng.normal(0.0, sigma, len(times)) if sigma > 0 else 0.0)

    order = [c for c in ("I", "V", "E", "T", "Phi", "Lambda", "Psi", "Eta", "F", "T_in", "P")]
    values = np.column_stack([noisy[c] for c in order])
    return SignalMatrix(timestamps=times, channels=tuple(order), values=values,
                        soc=np.clip(soc_series, 0.0, 1.0), phase=phase_list,
                        cycle=np.asarray(cycle_list))


def _ambient(config: CellConfig, t: float) -> float:
    if config.ambient_amplitude_c == 0.0:
        return config.ambient_mean_c
    return config.ambient_mean_c + config.ambient_amplitude_c * \
        np.sin(2.0 * np.pi * t / config.ambient_period_s)


# --- scenario suites -------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    name: str
    cell_type: str
    channels: tuple[str, ...]
    protocol: Protocol
    config: CellConfig


def _expansion_scenario() -> Scenario:
    return Scenario(
        name="expansion-cell",
        cell_type="pouch-with-displacement-sensor",
        channels=("I", "V", "E", "T"),
        protocol=Protocol((
            CCCharge(c_rate=1.5, v_limit=4.2),
            CVCharge(voltage=4.2, cutoff_c_rate=1.0 / 50.0),
            Rest(duration_s=300.0),
            DynamicDischarge(profile="drive_cycle", dod=0.5),
        )),
        config=CellConfig(),
    )


def _optical_scenario() -> Scenario:
    return Scenario(
        name="optical-cell",
        cell_type="pouch-with-fiber-optic-sensor",
        channels=("I", "V", "Phi", "Lambda"),
        protocol=Protocol((
            CVCharge(voltage=4.2, cutoff_c_rate=1.0 / 20.0, max_c_rate=2.0),
            Rest(duration_s=600.0),
            CCDischarge(c_rate=1.5, v_limit=2.7),
            Rest(duration_s=600.0),
        )),
        config=CellConfig(initial_soc=0.2),
    )


def _force_scenario() -> Scenario:
    return Scenario(
        name="force-cell",
        cell_type="coin-with-force-and-reference-electrode",
        channels=("I", "V", "Psi", "Eta", "F", "T_in", "P"),
        protocol=Protocol((
            CCCharge(c_rate=0.5, v_limit=4.2),
            CVCharge(voltage=4.2, cutoff_c_rate=1.0 / 50.0),
            Rest(duration_s=600.0),
            DynamicDischarge(profile="dst", v_limit=2.5),
        )),
        config=CellConfig(initial_soc=0.2),
    )


SCENARIOS = {
    "expansion-cell": _expansion_scenario,
    "optical-cell": _optical_scenario,
    "force-cell": _force_scenario,
}


def get_scenario(name: str, cycles: int | None = None, seed: int | None = None) -> Scenario:
    if name not in SCENARIOS:
        raise SchemaError(f"unknown scenario '{name}'; choose from {sorted(SCENARIOS)}")
    scenario = SCENARIOS[name]()
    if seed is not None:
        scenario = replace(scenario, config=replace(scenario.config, seed=seed))
    return scenario


def generate_suite(name: str, out_dir: str | Path, cycles: int = 3,
                   seed: int = 0) -> dict:
    """Simulate a named scenario and write its CSV plus a manifest JSON."""
    scenario = get_scenario(name, seed=seed)
    matrix = simulate(scenario.config, scenario.protocol, cycles=cycles)
    keep = matrix.select(scenario.channels)  # select() keeps soc/phase/cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = {
        "scenario": name, "cycles": cycles, "seed": seed,
        "channels": list(scenario.channels),
    }
    digest = hashlib.sha256(
        json.dumps(provenance, sort_keys=True).encode("utf-8")
    ).hexdigest()

    csv_name = f"{name}.csv"
    write_csv(keep, out_dir / csv_name, header_comment=f"config_sha256={digest}")

    boundaries = [int(np.argmax(matrix.cycle == c)) for c in range(cycles)]
    manifest = {
        "cell_type": scenario.cell_type,
        "scenario": name,
        "files": [csv_name],
        "cycles": cycles,
        "cycle_boundaries": boundaries,
        "channels": list(scenario.channels),
        "seed": seed,
        "config_sha256": digest,
    }
    manifest_path = out_dir / f"{name}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    manifest["_paths"] = [str(out_dir / csv_name), str(manifest_path)]
    return manifest
