"""Pre-fault AC power flow that supplies the dispatch operating point.

Loads are already folded into the admittance matrix as constant impedances,
so only device injections appear in the mismatch.  One GFM bus is the slack,
other GFM buses are PV and every remaining bus is PQ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError, ValidationError


@dataclass(frozen=True)
class Dispatch:
    """Converged pre-fault operating point."""

    bus_ids: tuple
    v: np.ndarray
    current: dict          # device name -> injected current phasor
    power: dict            # device name -> injected complex power
    iterations: int
    mismatch: float

    def bus_voltage(self, bus: int) -> complex:
        return complex(self.v[self.bus_ids.index(bus)])


def _dS_dV(y, v):
    ib = y @ v
    vnorm = v / np.abs(v)
    dv = sp.diags(v)
    dS_dVm = dv @ np.conj(y @ sp.diags(vnorm)) + sp.diags(np.conj(ib) * vnorm)
    dS_dVa = 1j * dv @ np.conj(sp.diags(ib) - y @ dv)
    return sp.csr_matrix(dS_dVm), sp.csr_matrix(dS_dVa)


def solve_power_flow(net, gfm_devices, gfl_devices, tol: float = 1e-12, max_iter: int = 30) -> Dispatch:
    idx = net.bus_index
    n = net.n_bus
    if not gfm_devices:
        raise ValidationError([("gfm", "at least one grid-forming device is required as voltage reference")])
    slack_devs = [d for d in gfm_devices if d.slack] or [gfm_devices[0]]
    if len(slack_devs) > 1:
        raise ValidationError([("gfm", "only one grid-forming device may be the slack")])
    slack = slack_devs[0]

    p_sch = np.zeros(n)
    q_sch = np.zeros(n)
    vm = np.ones(n)
    pv = set()
    for d in gfl_devices:
        p_sch[idx[d.bus]] += d.p_sp
        q_sch[idx[d.bus]] += d.q_sp
    for d in gfm_devices:
        k = idx[d.bus]
        vm[k] = d.v_set
        if d is not slack:
            p_sch[k] += d.p_sp
            pv.add(k)
    ref = idx[slack.bus]
    pv.discard(ref)
    pvl = sorted(pv)
    pq = [k for k in range(n) if k != ref and k not in pv]
    non_ref = pvl + pq

    y = sp.csr_matrix(net.y)
    va = np.zeros(n)
    v = vm * np.exp(1j * va)
    s_sch = p_sch + 1j * q_sch

    def mismatch(v):
        mis = v * np.conj(y @ v) - s_sch
        return np.r_[mis.real[non_ref], mis.imag[pq]]

    f = mismatch(v)
    it = 0
    while np.max(np.abs(f), initial=0.0) > tol:
        if it >= max_iter:
            raise SolverError(f"power flow did not converge in {max_iter} iterations "
                              f"(mismatch {np.max(np.abs(f)):.3e})")
        dVm, dVa = _dS_dV(y, v)
        j = sp.vstack([
            sp.hstack([dVa[non_ref][:, non_ref].real, dVm[non_ref][:, pq].real]),
            sp.hstack([dVa[pq][:, non_ref].imag, dVm[pq][:, pq].imag]),
        ]).tocsc()
        dx = spla.spsolve(j, -f)
        if not np.all(np.isfinite(dx)):
            raise SolverError("power flow Jacobian is singular")
        va[non_ref] += dx[: len(non_ref)]
        vm[pq] += dx[len(non_ref):]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        it += 1

    s_bus = v * np.conj(y @ v)
    current, power = {}, {}
    for d in gfl_devices:
        s = complex(d.p_sp, d.q_sp)
        power[d.name] = s
    for d in gfm_devices:
        k = idx[d.bus]
        others = sum(power[g.name] for g in gfl_devices if g.bus == d.bus)
        if d is slack:
            power[d.name] = complex(s_bus[k]) - others
        else:
            power[d.name] = complex(d.p_sp, s_bus[k].imag - others.imag)
    for d in list(gfl_devices) + list(gfm_devices):
        current[d.name] = (power[d.name] / v[idx[d.bus]]).conjugate()
    return Dispatch(bus_ids=net.bus_ids, v=v, current=current, power=power,
                    iterations=it, mismatch=float(np.max(np.abs(f), initial=0.0)))
