"""Inner loops of the traffic simulator.

Each kernel exists twice: an explicit loop compiled by numba and a
vectorised numpy version. ``USE_NUMBA`` picks the one exported under the
public name; both are importable for cross-checking and benchmarking.

Vehicles are stored as parallel arrays indexed by vehicle id. ``occ`` is the
lane a vehicle occupies for interaction purposes (the target lane while a
lane change is pending). Lane indices are 1-based.
"""

import numpy as np

from lanerec._accel import USE_NUMBA, njit

# neighbor slot order, fixed: ego_leader, left_leader, left_follower,
# right_leader, right_follower
N_SLOTS = 5


@njit
def leaders_loop(s, occ, active):
    n = s.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if not active[i]:
            continue
        best = -1
        for j in range(n):
            if j == i or not active[j] or occ[j] != occ[i] or s[j] <= s[i]:
                continue
            if best < 0 or s[j] < s[best]:
                best = j
        out[i] = best
    return out


def leaders_numpy(s, occ, active):
    n = s.shape[0]
    out = np.full(n, -1, dtype=np.int64)
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return out
    for lane in np.unique(occ[idx]):
        members = idx[occ[idx] == lane]
        # stable sort keeps lower ids first among equal positions
        order = members[np.argsort(s[members], kind="stable")]
        s_sorted = s[order]
        pos = np.searchsorted(s_sorted, s[members], side="right")
        has = pos < order.size
        out[members[has]] = order[pos[has]]
    return out


@njit
def step_loop(s, v, occ, v_des, active, turn_lane, zone_start, turn_speed,
              a_max, b, s0, T, b_max, length, dt):
    """Advance every active vehicle by one IDM step, in place.

    Returns a boolean array flagging vehicles whose gap to the leader was
    non-positive (emergency braking applied).
    """
    n = s.shape[0]
    lead = leaders_loop(s, occ, active)
    acc = np.zeros(n)
    emergency = np.zeros(n, dtype=np.bool_)
    sqrt_ab = 2.0 * np.sqrt(a_max * b)
    for i in range(n):
        if not active[i]:
            continue
        v0 = v_des[i]
        if turn_lane[occ[i]] and s[i] >= zone_start and turn_speed < v0:
            v0 = turn_speed
        r = v[i] / v0
        r2 = r * r
        a = a_max * (1.0 - r2 * r2)
        j = lead[i]
        if j >= 0:
            gap = s[j] - s[i] - length
            if gap <= 0.0:
                a = -b_max
                emergency[i] = True
            else:
                s_star = s0 + v[i] * T + v[i] * (v[i] - v[j]) / sqrt_ab
                q = s_star / gap
                a = a - a_max * q * q
        if a < -b_max:
            a = -b_max
        acc[i] = a
    for i in range(n):
        if not active[i]:
            continue
        a = acc[i]
        vn = v[i] + a * dt
        if vn < 0.0:
            s[i] += -v[i] * v[i] / (2.0 * a)
            v[i] = 0.0
        else:
            s[i] += v[i] * dt + 0.5 * a * dt * dt
            v[i] = vn if vn < v_des[i] else v_des[i]
    return emergency


def step_numpy(s, v, occ, v_des, active, turn_lane, zone_start, turn_speed,
               a_max, b, s0, T, b_max, length, dt):
    lead = leaders_numpy(s, occ, active)
    idx = np.flatnonzero(active)
    emergency = np.zeros(s.shape[0], dtype=bool)
    if idx.size == 0:
        return emergency
    vi = v[idx]
    v0 = v_des[idx].copy()
    capped = turn_lane[occ[idx]] & (s[idx] >= zone_start) & (turn_speed < v0)
    v0[capped] = turn_speed
    r = vi / v0
    r2 = r * r
    a = a_max * (1.0 - r2 * r2)

    j = lead[idx]
    has = j >= 0
    if has.any():
        jj = j[has]
        vh = vi[has]
        gap = s[jj] - s[idx[has]] - length
        crash = gap <= 0.0
        safe_gap = np.where(crash, 1.0, gap)
        s_star = s0 + vh * T + vh * (vh - v[jj]) / (2.0 * np.sqrt(a_max * b))
        q = s_star / safe_gap
        a_lead = np.where(crash, -b_max, a[has] - a_max * q * q)
        a[has] = a_lead
        emergency[idx[has][crash]] = True
    a = np.maximum(a, -b_max)

    vn = vi + a * dt
    stop = vn < 0.0
    ds = np.where(stop, -vi * vi / (2.0 * np.where(stop, a, 1.0)),
                  vi * dt + 0.5 * a * dt * dt)
    s[idx] += ds
    v[idx] = np.where(stop, 0.0, np.minimum(vn, v_des[idx]))
    return emergency


@njit
def neighbors_loop(s, occ, active, ego, num_lanes):
    out = np.full(N_SLOTS, -1, dtype=np.int64)
    le = occ[ego]
    se = s[ego]
    for j in range(s.shape[0]):
        if j == ego or not active[j]:
            continue
        lj = occ[j]
        if lj == le:
            lslot, fslot = 0, -1
        elif lj == le - 1:
            lslot, fslot = 1, 2
        elif lj == le + 1:
            lslot, fslot = 3, 4
        else:
            continue
        if s[j] > se:
            k = out[lslot]
            if k < 0 or s[j] < s[k]:
                out[lslot] = j
        elif fslot >= 0:
            k = out[fslot]
            if k < 0 or s[j] > s[k]:
                out[fslot] = j
    return out


def neighbors_numpy(s, occ, active, ego, num_lanes):
    out = np.full(N_SLOTS, -1, dtype=np.int64)
    cand = active.copy()
    cand[ego] = False
    le = occ[ego]
    se = s[ego]
    specs = ((0, le, True), (1, le - 1, True), (2, le - 1, False),
             (3, le + 1, True), (4, le + 1, False))
    for slot, lane, ahead in specs:
        if lane < 1 or lane > num_lanes:
            continue
        mask = cand & (occ == lane) & ((s > se) if ahead else (s <= se))
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            continue
        # argmin/argmax return the first (lowest id) among ties
        out[slot] = idx[np.argmin(s[idx])] if ahead else idx[np.argmax(s[idx])]
    return out


@njit
def first_overlap_loop(s, occ, active, length):
    n = s.shape[0]
    for i in range(n):
        if not active[i]:
            continue
        for j in range(i + 1, n):
            if active[j] and occ[j] == occ[i] and abs(s[j] - s[i]) < length:
                return i, j
    return -1, -1


def first_overlap_numpy(s, occ, active, length):
    idx = np.flatnonzero(active)
    if idx.size < 2:
        return -1, -1
    ii, jj = np.triu_indices(idx.size, k=1)
    a, c = idx[ii], idx[jj]
    hit = (occ[a] == occ[c]) & (np.abs(s[a] - s[c]) < length)
    if not hit.any():
        return -1, -1
    k = np.flatnonzero(hit)[0]
    return int(a[k]), int(c[k])


if USE_NUMBA:
    leaders = leaders_loop
    step = step_loop
    neighbors = neighbors_loop
    first_overlap = first_overlap_loop
else:
    leaders = leaders_numpy
    step = step_numpy
    neighbors = neighbors_numpy
    first_overlap = first_overlap_numpy
