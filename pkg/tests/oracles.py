"""Independent reference computations the package is checked against.

Nothing here imports the numerical code under test; each routine takes the
long way round (incidence matrices, bisection, finite differences, full
matrix inverses) so that agreement is meaningful.
"""
import numpy as np


def incidence_admittance(case):
    """Y = A^T diag(y_series) A + diag(bus shunts + half line charging at each end)."""
    ids = [b.id for b in case.buses]
    pos = {b: i for i, b in enumerate(ids)}
    lines = [br for br in case.branches if br.status]
    a = np.zeros((len(lines), len(ids)))
    for k, br in enumerate(lines):
        a[k, pos[br.from_bus]] = 1.0
        a[k, pos[br.to_bus]] = -1.0
    y_series = np.array([1.0 / complex(br.r, br.x) for br in lines])
    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in case.buses])
    for br in lines:
        shunt[pos[br.from_bus]] += 0.5j * br.b_charging
        shunt[pos[br.to_bus]] += 0.5j * br.b_charging
    return a.T @ np.diag(y_series) @ a + np.diag(shunt)


def _bisect(f, lo, hi, iterations=200):
    """Root of f on [lo, hi] with f(lo) <= 0 <= f(hi) (or the reverse)."""
    f_lo = f(lo)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if (f(mid) <= 0) == (f_lo <= 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def two_bus_voltage(e, r, x, p, q):
    """Load-bus voltage (high-voltage branch) of a source ``e`` (angle 0) feeding p + jq
    through r + jx.

    |V|^2 = u solves u^2 + (2(pr + qx) - e^2) u + |S|^2 |z|^2 = 0; the larger root is
    found by bisection on [-b/2, -b], then the phasor follows from
    e conj(V) = u + z conj(S).
    """
    z = complex(r, x)
    s = complex(p, q)
    b = 2.0 * (p * r + q * x) - e * e
    c = abs(s) ** 2 * abs(z) ** 2
    f = lambda u: u * u + b * u + c
    if b >= 0 or f(-b / 2.0) > 0:
        raise ValueError("load not deliverable")
    u = _bisect(f, -b / 2.0, -b)
    return ((u + z * s.conjugate()) / e).conjugate()


def finite_difference_dqdv(y, v, h=1e-6):
    """Central differences of Q = Im(V conj(Y V)) w.r.t. each |V_j|, angles held."""
    vm, va = np.abs(v), np.angle(v)
    n = len(v)
    out = np.zeros((n, n))
    for j in range(n):
        up, dn = vm.copy(), vm.copy()
        up[j] += h
        dn[j] -= h
        q_up = np.imag(up * np.exp(1j * va) * np.conj(y @ (up * np.exp(1j * va))))
        q_dn = np.imag(dn * np.exp(1j * va) * np.conj(y @ (dn * np.exp(1j * va))))
        out[:, j] = (q_up - q_dn) / (2.0 * h)
    return out


def open_circuit_thevenin(y, gen_idx, load_idx, v_gen):
    """(V_th, Z_th) at ``load_idx`` by inverting the full non-generator block of Y."""
    others = [i for i in range(y.shape[0]) if i not in gen_idx]
    z = np.linalg.inv(y[np.ix_(others, others)])
    v_open = -z @ y[np.ix_(others, gen_idx)] @ np.asarray(v_gen)
    k = others.index(load_idx)
    return complex(v_open[k]), complex(z[k, k])


def solvable(e, z, p, q):
    """A real load voltage exists for p + jq behind source magnitude e and impedance z."""
    b = 2.0 * (p * z.real + q * z.imag) - e * e
    disc = b * b - 4.0 * (p * p + q * q) * abs(z) ** 2
    return b <= 0.0 and disc >= 0.0


def _sup(feasible, start):
    """Supremum of a feasible interval containing ``start``, by doubling then bisection."""
    step = max(abs(start), 1e-3)
    hi = start + step
    while feasible(hi):
        step *= 2.0
        hi = start + step
        if step > 1e9:
            return float("inf")
    lo = start
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def transfer_limits_by_bisection(e, z, p, q):
    """(P_max at fixed q, Q_max at fixed p, S_max at fixed power factor)."""
    p_max = _sup(lambda t: solvable(e, z, t, q), p)
    q_max = _sup(lambda t: solvable(e, z, p, t), q)
    s = abs(complex(p, q))
    lam = _sup(lambda k: solvable(e, z, k * p, k * q), 1.0)
    return p_max, q_max, lam * s


def reference_local_controller(weak, resources, priority_list, q_for):
    """Step-by-step port of the local control pseudo-code.

    ``q_for(bus)`` returns the required injection at ``bus`` for the weak bus.
    Returns (selected bus or None, last computed q_req).
    """
    def available_at(bus, q_req):
        return any(r.bus == bus and r.active and r.q_available >= q_req for r in resources)

    w = weak
    q_req = q_for(w)
    if available_at(w, q_req):
        return w, q_req
    remaining = list(priority_list)
    while remaining:
        i = remaining.pop(0)
        q_req = q_for(i)
        if available_at(i, q_req):
            return i, q_req
    return None, q_req
