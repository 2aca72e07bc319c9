"""Grid-following (GFL) and grid-forming (GFM) inverter controller models.

Frame conventions
-----------------
Phasors are complex numbers in the common network (xy) frame, ``x + jy``.
A device dq frame at angle ``theta`` maps as ``X_xy = X_dq * exp(j*theta)``
with ``X_dq = X_d + jX_q``.  The GFL PLL aligns the d-axis with the terminal
voltage, so it drives ``V_q`` to zero.  With that convention the injected
complex power is ``S = V_d * (I_d - j*I_q)``, i.e. a *negative* ``I_q``
injects reactive power.

The virtual-reactance correction turns both device types into Norton
equivalents ``I = source - shunt * V``:

* GFM: ``source = E / (j x')``, ``shunt = 1 / (j x')``
* GFL: ``source = I'``,         ``shunt = -j b'``  (``b' = 1 / x'``)
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass, field, replace

from .errors import StvsError, ValidationError
from .netmodel import Norton

OMEGA_NOM = 2.0 * math.pi * 50.0


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SmTransientModel:
    e_q_prime: float
    delta: float
    x_d_prime: float
    x_q: float

    def __post_init__(self):
        if not (self.x_d_prime > 0 and self.x_q > 0):
            raise ValidationError([("sm", "reactances must be positive")])


@dataclass(frozen=True)
class GflDevice:
    name: str
    bus: int
    p_sp: float
    q_sp: float = 0.0
    i_max: float = 1.2
    b_virtual: float = 0.0
    pll_kp: float = 50.0
    pll_ki: float = 900.0
    outer_kp: float = 0.5
    outer_ki: float = 20.0
    i_track_tau: float = 2e-3
    k_q: float = 2.0

    kind = "gfl"

    def validate(self, path="gfl"):
        issues = []
        if not self.i_max > 0:
            issues.append((f"{path}.i_max", "must be positive"))
        if not self.b_virtual >= 0:
            issues.append((f"{path}.b_virtual", "must be non-negative"))
        if not self.i_track_tau > 0:
            issues.append((f"{path}.i_track_tau", "must be positive"))
        return issues


@dataclass(frozen=True)
class GfmDevice:
    name: str
    bus: int
    p_sp: float = 0.0
    q_sp: float = 0.0
    e0: float = 1.0
    v_set: float = 1.0
    slack: bool = False
    m_p: float = 0.05
    n_q: float = 0.05
    i_max: float = 1.2
    x_virtual: float = 0.3
    tau_v: float = 0.05
    track_tau: float = 2e-3

    kind = "gfm"

    def validate(self, path="gfm"):
        issues = []
        if not self.i_max > 0:
            issues.append((f"{path}.i_max", "must be positive"))
        if not self.x_virtual > 0:
            issues.append((f"{path}.x_virtual", "non-positive reactance"))
        if not (self.m_p > 0 and self.n_q > 0):
            issues.append((f"{path}", "droop gains must be positive"))
        if not (self.tau_v > 0 and self.track_tau > 0):
            issues.append((f"{path}", "time constants must be positive"))
        return issues


@dataclass(frozen=True)
class SecurityLimits:
    v_lvrt_th: float = 0.2
    v_hvrt_th: float = 1.2

    def __post_init__(self):
        if not (0 < self.v_lvrt_th < 1 < self.v_hvrt_th):
            raise ValidationError([("limits", "require 0 < v_lvrt_th < 1 < v_hvrt_th")])


@dataclass(frozen=True)
class FrtThresholds:
    v_enter: float = 0.8
    v_exit: float = 0.85
    tau_rec: float = 0.05
    recovery_tolerance: float = 1e-3

    def __post_init__(self):
        if not self.v_enter < self.v_exit:
            raise ValidationError([("frt", "v_enter must be below v_exit")])
        if not (self.tau_rec > 0 and self.recovery_tolerance > 0):
            raise ValidationError([("frt", "tau_rec and recovery_tolerance must be positive")])


# --------------------------------------------------------------------------
# frames and Norton forms
# --------------------------------------------------------------------------


def dq_to_xy(x_dq: complex, theta: float) -> complex:
    return x_dq * cmath.exp(1j * theta)


def xy_to_dq(x_xy: complex, theta: float) -> complex:
    return x_xy * cmath.exp(-1j * theta)


def sm_norton_current(sm: SmTransientModel, v: complex) -> complex:
    """Injected current of the synchronous-machine transient model for terminal voltage ``v``."""
    u_q = cmath.exp(1j * sm.delta)
    u_d = -1j * u_q
    v_q = (v * u_q.conjugate()).real * u_q
    v_d = (v * u_d.conjugate()).real * u_d
    i_src = (sm.e_q_prime / sm.x_d_prime) * cmath.exp(1j * (sm.delta - math.pi / 2))
    return i_src - v_q / (1j * sm.x_d_prime) - v_d / (1j * sm.x_q)


def gfl_inner_reference(i_ref_outer, v_dq, theta_dq, x_d_prime, x_q):
    """Inner-loop current reference with the SM-emulating correction.

    All arguments are ``(d, q)`` pairs except the angles and reactances.  With
    ``x_d_prime == x_q`` the cross terms vanish and the result reduces to a
    parallel virtual reactance.
    """
    i_d0, i_q0 = i_ref_outer
    v_d, v_q = v_dq
    s, c = math.sin(theta_dq), math.cos(theta_dq)
    cross = s * c * (1.0 / x_q - 1.0 / x_d_prime)
    i_d = i_d0 - cross * v_d - (c * c / x_d_prime + s * s / x_q) * v_q
    i_q = i_q0 + (c * c / x_q + s * s / x_d_prime) * v_d + cross * v_q
    return i_d, i_q


def gfl_norton_phasor(i_internal: complex, v: complex, b_virtual: float) -> complex:
    return complex(i_internal.real - v.imag * b_virtual, i_internal.imag + v.real * b_virtual)


def gfl_internal_from_terminal(i_terminal: complex, v: complex, b_virtual: float) -> complex:
    """Inverse of :func:`gfl_norton_phasor`: internal source current behind the virtual shunt."""
    return complex(i_terminal.real + v.imag * b_virtual, i_terminal.imag - v.real * b_virtual)


def gfm_terminal_voltage(e: complex, i: complex, x_virtual: float) -> complex:
    if not x_virtual > 0:
        raise ValidationError([("x_virtual", "non-positive GFM virtual reactance")])
    return complex(e.real + i.imag * x_virtual, e.imag - i.real * x_virtual)


def gfm_current_from_voltage(e: complex, v: complex, x_virtual: float) -> complex:
    if not x_virtual > 0:
        raise ValidationError([("x_virtual", "non-positive GFM virtual reactance")])
    return (e - v) / (1j * x_virtual)


def gfm_norton(bus: int, e: complex, x_virtual: float) -> Norton:
    if not x_virtual > 0:
        raise ValidationError([("x_virtual", "non-positive GFM virtual reactance")])
    y = 1.0 / (1j * x_virtual)
    return Norton(bus=bus, shunt=y, source=e * y)


def gfl_norton(bus: int, i_internal: complex, b_virtual: float) -> Norton:
    if b_virtual < 0:
        raise ValidationError([("b_virtual", "negative GFL virtual susceptance")])
    return Norton(bus=bus, shunt=complex(0.0, -b_virtual), source=complex(i_internal))


# --------------------------------------------------------------------------
# baseline (common) FRT controller
# --------------------------------------------------------------------------


def gfl_lvrt_baseline(v_filt: float, k_q: float, i_max: float, i_d_prefault: float):
    """Common LVRT current reference.

    Returns ``(i_d, i_reactive)`` where ``i_reactive >= 0`` is the reactive
    (voltage-supporting) current magnitude; in this package's dq convention
    the q-axis reference is ``-i_reactive``.
    """
    i_r = min(max(k_q * (0.9 - v_filt), 0.0), i_max)
    i_d = min(i_d_prefault, math.sqrt(max(i_max * i_max - i_r * i_r, 0.0)))
    return i_d, i_r


# --------------------------------------------------------------------------
# control-mode state machine
# --------------------------------------------------------------------------


class Mode(enum.IntEnum):
    NORMAL = 1
    FRT = 2
    RECOVERY = 3


_LEGAL = {
    (Mode.NORMAL, Mode.FRT),
    (Mode.FRT, Mode.RECOVERY),
    (Mode.RECOVERY, Mode.NORMAL),
    (Mode.RECOVERY, Mode.FRT),
}


class IllegalTransition(StvsError):
    pass


@dataclass(frozen=True)
class ControlMode:
    state: Mode = Mode.NORMAL
    entered_at: float = 0.0
    cause: str = "initial"
    snapshot: dict = field(default_factory=dict)

    def transition(self, new: Mode, t: float, cause: str, snapshot=None) -> "ControlMode":
        if (self.state, new) not in _LEGAL:
            raise IllegalTransition(f"illegal mode transition {self.state.name} -> {new.name}")
        snap = self.snapshot if snapshot is None else snapshot
        return ControlMode(state=new, entered_at=t, cause=cause, snapshot=snap)


def frt_mode_step(mode: ControlMode, v_filt: float, t: float, thresholds: FrtThresholds,
                  ref_gap: float = math.inf) -> ControlMode:
    """Advance the FRT switching logic by one evaluation.

    ``ref_gap`` is the distance between the transitioning references and the
    pre-freeze references; it only matters in RECOVERY.
    """
    st = mode.state
    if st is Mode.NORMAL:
        if v_filt < thresholds.v_enter:
            return mode.transition(Mode.FRT, t, f"filtered voltage {v_filt:.4f} < {thresholds.v_enter}")
    elif st is Mode.FRT:
        if v_filt > thresholds.v_exit:
            return mode.transition(Mode.RECOVERY, t, f"filtered voltage {v_filt:.4f} > {thresholds.v_exit}")
    elif st is Mode.RECOVERY:
        if v_filt < thresholds.v_enter:
            return mode.transition(Mode.FRT, t, f"re-fault: filtered voltage {v_filt:.4f} < {thresholds.v_enter}")
        if ref_gap < thresholds.recovery_tolerance:
            return mode.transition(Mode.NORMAL, t, f"reference gap {ref_gap:.2e} < {thresholds.recovery_tolerance}")
    return mode


def recovery_reference(ref_frozen, ref_prefreeze, dt_since_clear: float, tau_rec: float):
    if not tau_rec > 0:
        raise ValidationError([("tau_rec", "must be positive")])
    w = 1.0 - math.exp(-max(dt_since_clear, 0.0) / tau_rec)
    return ref_frozen + w * (ref_prefreeze - ref_frozen)


# --------------------------------------------------------------------------
# mode-1 outer loops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GflOuterState:
    xi_p: float
    xi_q: float
    theta_pll: float
    xi_pll: float


def gfl_outer_reference(dev: GflDevice, state: GflOuterState, p: float, q: float) -> complex:
    """dq internal-current reference produced by the P/Q PI loops."""
    i_d = dev.outer_kp * (dev.p_sp - p) + state.xi_p
    i_q = -(dev.outer_kp * (dev.q_sp - q) + state.xi_q)
    return complex(i_d, i_q)


def gfl_outer_derivatives(dev: GflDevice, state: GflOuterState, p: float, q: float, v_q: float) -> GflOuterState:
    """Time derivatives of the PI integrators and the PLL in normal mode."""
    return GflOuterState(
        xi_p=dev.outer_ki * (dev.p_sp - p),
        xi_q=dev.outer_ki * (dev.q_sp - q),
        theta_pll=dev.pll_kp * v_q + state.xi_pll,
        xi_pll=dev.pll_ki * v_q,
    )


def gfm_droop_derivatives(dev: GfmDevice, e: float, p: float, q: float, omega0: float = OMEGA_NOM):
    """Return ``(d delta/dt, dE/dt)`` for frequency and voltage droop."""
    d_delta = omega0 * dev.m_p * (dev.p_sp - p)
    d_e = (dev.e0 + dev.n_q * (dev.q_sp - q) - e) / dev.tau_v
    return d_delta, d_e


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def resync_tracking(delta: float, omega: float, pcc_angle: float, pcc_frequency: float,
                    dt: float, tau: float):
    """Exact first-order convergence of the GFM angle and frequency to the PCC values over ``dt``."""
    k = math.exp(-dt / tau)
    gap = wrap_angle(delta - pcc_angle)
    return pcc_angle + gap * k, pcc_frequency + (omega - pcc_frequency) * k


def with_tuning(dev, value: float):
    """Copy of ``dev`` with its virtual impedance parameter replaced."""
    if isinstance(dev, GfmDevice):
        return replace(dev, x_virtual=value)
    return replace(dev, b_virtual=value)
