"""Grid-geometry kernels: rasterization, line-of-sight, knife-edge profiles.

All functions here are numba ``@njit`` kernels operating on plain ndarrays
and scalars (see backend for the numpy fallback). Grid convention: row 0 is
the southern edge, ``grid[iy, ix]``, pixel (iy, ix) center at
``((ix + 0.5) * res, (iy + 0.5) * res)`` in the local frame.
"""

import numpy as np

from .backend import njit, prange


@njit(cache=True)
def point_in_polygon(px, py, poly_x, poly_y):
    """Even-odd rule point-in-polygon test (boundary points follow the
    crossing rule of the algorithm; callers should not rely on exact-edge
    behavior)."""
    n = poly_x.shape[0]
    inside = False
    j = n - 1
    for i in range(n):
        yi = poly_y[i]
        yj = poly_y[j]
        if (yi > py) != (yj > py):
            x_cross = poly_x[i] + (py - yi) * (poly_x[j] - poly_x[i]) / (yj - yi)
            if px < x_cross:
                inside = not inside
        j = i
    return inside


@njit(cache=True)
def rasterize_heights(grid, poly_x_flat, poly_y_flat, offsets, heights, res):
    """Burn max footprint height into each pixel whose center lies inside
    the footprint. ``offsets[k]:offsets[k+1]`` delimits polygon k in the
    flat vertex arrays; grid is modified in place.
    """
    ny, nx = grid.shape
    n_poly = heights.shape[0]
    for k in range(n_poly):
        a = offsets[k]
        b = offsets[k + 1]
        xmin = poly_x_flat[a]
        xmax = poly_x_flat[a]
        ymin = poly_y_flat[a]
        ymax = poly_y_flat[a]
        for i in range(a + 1, b):
            if poly_x_flat[i] < xmin:
                xmin = poly_x_flat[i]
            if poly_x_flat[i] > xmax:
                xmax = poly_x_flat[i]
            if poly_y_flat[i] < ymin:
                ymin = poly_y_flat[i]
            if poly_y_flat[i] > ymax:
                ymax = poly_y_flat[i]
        ix0 = max(0, int(np.floor(xmin / res - 0.5)))
        ix1 = min(nx - 1, int(np.ceil(xmax / res - 0.5)))
        iy0 = max(0, int(np.floor(ymin / res - 0.5)))
        iy1 = min(ny - 1, int(np.ceil(ymax / res - 0.5)))
        h = heights[k]
        for iy in range(iy0, iy1 + 1):
            cy = (iy + 0.5) * res
            for ix in range(ix0, ix1 + 1):
                cx = (ix + 0.5) * res
                if grid[iy, ix] < h and point_in_polygon(
                    cx, cy, poly_x_flat[a:b], poly_y_flat[a:b]
                ):
                    grid[iy, ix] = h
    return grid


@njit(cache=True)
def segment_is_clear(bmap, res, x0, y0, z0, x1, y1, z1):
    """True if the 3-D segment clears every building pixel it traverses.

    2-D DDA over the grid; a pixel blocks when its building height is >=
    the segment height sampled at the midpoint of the pixel's parameter
    interval.
    """
    ny, nx = bmap.shape
    dx = x1 - x0
    dy = y1 - y0
    length = np.sqrt(dx * dx + dy * dy)
    if length < 1e-12:
        # vertical segment: only the single pixel under it matters
        ix = min(max(int(x0 / res), 0), nx - 1)
        iy = min(max(int(y0 / res), 0), ny - 1)
        h = bmap[iy, ix]
        return not (h > 0.0 and h >= 0.5 * (z0 + z1))
    ix = min(max(int(x0 / res), 0), nx - 1)
    iy = min(max(int(y0 / res), 0), ny - 1)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    inv_dx = 1e30 if dx == 0.0 else 1.0 / dx
    inv_dy = 1e30 if dy == 0.0 else 1.0 / dy
    # parameter t in [0,1] of next x/y gridline crossing
    if dx > 0:
        t_max_x = ((ix + 1) * res - x0) * inv_dx
    elif dx < 0:
        t_max_x = (ix * res - x0) * inv_dx
    else:
        t_max_x = 2.0
    if dy > 0:
        t_max_y = ((iy + 1) * res - y0) * inv_dy
    elif dy < 0:
        t_max_y = (iy * res - y0) * inv_dy
    else:
        t_max_y = 2.0
    t_delta_x = abs(res * inv_dx)
    t_delta_y = abs(res * inv_dy)
    t_prev = 0.0
    while True:
        t_exit = min(min(t_max_x, t_max_y), 1.0)
        h = bmap[iy, ix]
        if h > 0.0:
            t_mid = 0.5 * (t_prev + t_exit)
            z_mid = z0 + (z1 - z0) * t_mid
            if h >= z_mid:
                return False
        if t_exit >= 1.0:
            return True
        t_prev = t_exit
        if t_max_x < t_max_y:
            t_max_x += t_delta_x
            ix += step_x
            if ix < 0 or ix >= nx:
                return True
        else:
            t_max_y += t_delta_y
            iy += step_y
            if iy < 0 or iy >= ny:
                return True


@njit(cache=True, parallel=True)
def los_map(bmap, res, tx_x, tx_y, tx_z, rx_z):
    """Boolean LOS grid from the transmitter to every pixel center at
    receiver height."""
    ny, nx = bmap.shape
    out = np.zeros((ny, nx), dtype=np.bool_)
    for iy in prange(ny):
        cy = (iy + 0.5) * res
        for ix in range(nx):
            cx = (ix + 0.5) * res
            out[iy, ix] = segment_is_clear(bmap, res, tx_x, tx_y, tx_z, cx, cy, rx_z)
    return out


@njit(cache=True)
def antenna_gain_linear(
    isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back, bs_az_deg, downtilt_deg,
    dx, dy, dz,
):
    """Linear antenna gain toward direction (dx, dy, dz); azimuth is
    clockwise from north (+y), downtilt rotates the boresight below the
    horizon."""
    if isotropic:
        return 1.0
    az = np.degrees(np.arctan2(dx, dy))
    el = np.degrees(np.arctan2(dz, np.sqrt(dx * dx + dy * dy)))
    az_off = (az - bs_az_deg + 180.0) % 360.0 - 180.0
    el_off = el + downtilt_deg
    atten = 12.0 * (az_off / hpbw_az) ** 2 + 12.0 * (el_off / hpbw_el) ** 2
    if atten > front_to_back:
        atten = front_to_back
    return 10.0 ** ((bs_gain_db - atten) / 10.0)


@njit(cache=True)
def fresnel_power_mean(eps_r, sigma, f_hz, cos_i):
    """Polarization-averaged power reflection coefficient
    (|Gamma_TE|^2 + |Gamma_TM|^2) / 2 for complex permittivity
    eps_r - j sigma / (2 pi f eps0)."""
    eps0 = 8.8541878128e-12
    epsc = complex(eps_r, -sigma / (2.0 * np.pi * f_hz * eps0))
    if cos_i < 0.0:
        cos_i = 0.0
    sin2 = 1.0 - cos_i * cos_i
    root = np.sqrt(epsc - sin2)
    gte = (cos_i - root) / (cos_i + root)
    gtm = (epsc * cos_i - root) / (epsc * cos_i + root)
    return 0.5 * (abs(gte) ** 2 + abs(gtm) ** 2)


@njit(cache=True)
def knife_edge_loss_db(v):
    """ITU-R P.526 single knife-edge approximation, 0 dB below v = -0.78."""
    if v <= -0.78:
        return 0.0
    return 6.9 + 20.0 * np.log10(np.sqrt((v - 0.1) ** 2 + 1.0) + v - 0.1)


@njit(cache=True)
def knife_edge_profile(bmap, res, tx_x, tx_y, tx_z, rx_x, rx_y, rx_z, wavelength):
    """Dominant single knife edge along the vertical plane TX->RX.

    Walks the 2-D line over building pixels, computes the Fresnel
    parameter v for each obstruction sample against the straight TX->RX
    line, and returns (v_max, edge_x, edge_y, edge_z) for the strongest
    one, or v_max = -1e30 when no building pixel is traversed.
    """
    ny, nx = bmap.shape
    dx = rx_x - tx_x
    dy = rx_y - tx_y
    dz = rx_z - tx_z
    ground = np.sqrt(dx * dx + dy * dy)
    d3 = np.sqrt(ground * ground + dz * dz)
    v_max = -1e30
    ex = 0.0
    ey = 0.0
    ez = 0.0
    if ground < 1e-9 or d3 < 1e-9:
        return v_max, ex, ey, ez
    ix = min(max(int(tx_x / res), 0), nx - 1)
    iy = min(max(int(tx_y / res), 0), ny - 1)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    inv_dx = 1e30 if dx == 0.0 else 1.0 / dx
    inv_dy = 1e30 if dy == 0.0 else 1.0 / dy
    if dx > 0:
        t_max_x = ((ix + 1) * res - tx_x) * inv_dx
    elif dx < 0:
        t_max_x = (ix * res - tx_x) * inv_dx
    else:
        t_max_x = 2.0
    if dy > 0:
        t_max_y = ((iy + 1) * res - tx_y) * inv_dy
    elif dy < 0:
        t_max_y = (iy * res - tx_y) * inv_dy
    else:
        t_max_y = 2.0
    t_delta_x = abs(res * inv_dx)
    t_delta_y = abs(res * inv_dy)
    t_prev = 0.0
    while True:
        t_exit = min(min(t_max_x, t_max_y), 1.0)
        h = bmap[iy, ix]
        if h > 0.0:
            t_mid = 0.5 * (t_prev + t_exit)
            d1 = t_mid * d3
            d2 = d3 - d1
            if d1 > 1e-6 and d2 > 1e-6:
                z_line = tx_z + dz * t_mid
                clearance = h - z_line
                v = clearance * np.sqrt(2.0 * d3 / (wavelength * d1 * d2))
                if v > v_max:
                    v_max = v
                    ex = tx_x + dx * t_mid
                    ey = tx_y + dy * t_mid
                    ez = h
        if t_exit >= 1.0:
            return v_max, ex, ey, ez
        t_prev = t_exit
        if t_max_x < t_max_y:
            t_max_x += t_delta_x
            ix += step_x
            if ix < 0 or ix >= nx:
                return v_max, ex, ey, ez
        else:
            t_max_y += t_delta_y
            iy += step_y
            if iy < 0 or iy >= ny:
                return v_max, ex, ey, ez


@njit(cache=True)
def _trace_one_ray(
    bmap, res, seg, seg_nx, seg_ny, seg_mat, eps_arr, sig_arr,
    cell_start, cell_walls,
    freq_hz, wavelength, max_bounces, enable_reflection,
    tx_x, tx_y, tx_z, z_lo, z_hi, rx_z,
    dx, dy, dz, g_launch, d_omega,
    accum,
    record, target_ix, target_iy, rec_pow, rec_len, rec_bnc, rec_n,
):
    """Propagate one ray through the 2.5-D scene, accumulating bounce-path
    power into ``accum``. Direct (0-bounce) energy is handled analytically
    by the caller, so capture only starts after the first reflection.

    The capture rule: a ray contributes to every outdoor pixel whose
    column it crosses while its height is inside [z_lo, z_hi]. Power per
    crossing is the free-space tube estimate at the unfolded distance from
    the mirrored virtual source to the pixel center, weighted by the ray
    tube's solid angle over the capture box cross-section.
    """
    ny, nx = bmap.shape
    four_pi = 4.0 * np.pi
    pos_x, pos_y, pos_z = tx_x, tx_y, tx_z
    sv_x, sv_y, sv_z = tx_x, tx_y, tx_z  # virtual (mirrored) source
    gamma2 = 1.0
    bounces = 0
    last_wall = -1
    guard = 0
    while True:
        guard += 1
        if guard > 10000:
            return
        ix = int(pos_x / res)
        iy = int(pos_y / res)
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
            return
        inv_dx = 1e30 if dx == 0.0 else 1.0 / dx
        inv_dy = 1e30 if dy == 0.0 else 1.0 / dy
        step_x = 1 if dx > 0 else -1
        step_y = 1 if dy > 0 else -1
        if dx > 0:
            t_max_x = ((ix + 1) * res - pos_x) * inv_dx
        elif dx < 0:
            t_max_x = (ix * res - pos_x) * inv_dx
        else:
            t_max_x = 1e30
        if dy > 0:
            t_max_y = ((iy + 1) * res - pos_y) * inv_dy
        elif dy < 0:
            t_max_y = (iy * res - pos_y) * inv_dy
        else:
            t_max_y = 1e30
        t_delta_x = abs(res * inv_dx)
        t_delta_y = abs(res * inv_dy)
        t_cursor = 0.0
        a_perp = res * res * (abs(dx) + abs(dy) + abs(dz))
        while True:
            t_exit = min(t_max_x, t_max_y)
            # nearest wall hit inside this cell's parameter interval
            t_hit = 1e30
            hit_idx = -1
            if enable_reflection and seg.shape[0] > 0:
                c = iy * nx + ix
                for wi in range(cell_start[c], cell_start[c + 1]):
                    widx = cell_walls[wi]
                    if widx == last_wall:
                        continue
                    x1 = seg[widx, 0]
                    y1 = seg[widx, 1]
                    ex = seg[widx, 2] - x1
                    ey = seg[widx, 3] - y1
                    det = ex * dy - ey * dx
                    if abs(det) < 1e-14:
                        continue
                    rx_ = x1 - pos_x
                    ry_ = y1 - pos_y
                    t = (ex * ry_ - ey * rx_) / det
                    if t <= 1e-9 or t >= t_hit or t > t_exit + 1e-9:
                        continue
                    u = (dx * ry_ - dy * rx_) / det
                    if u < -1e-9 or u > 1.0 + 1e-9:
                        continue
                    if pos_z + dz * t <= seg[widx, 4]:
                        t_hit = t
                        hit_idx = widx
            seg_end = t_exit if hit_idx < 0 else min(t_exit, t_hit)
            # capture: overlap of the z band with this cell interval
            if dz < 0.0 and bounces >= 1 and bmap[iy, ix] == 0.0:
                t_bh = (z_hi - pos_z) / dz
                t_bl = (z_lo - pos_z) / dz
                ov0 = t_cursor if t_cursor > t_bh else t_bh
                ov1 = seg_end if seg_end < t_bl else t_bl
                if ov1 > ov0:
                    cx = (ix + 0.5) * res
                    cy = (iy + 0.5) * res
                    lx = cx - sv_x
                    ly = cy - sv_y
                    lz = rx_z - sv_z
                    length = np.sqrt(lx * lx + ly * ly + lz * lz)
                    w_tube = d_omega * length * length / a_perp
                    amp = wavelength / (four_pi * length)
                    p = g_launch * gamma2 * amp * amp * w_tube
                    accum[iy, ix] += p
                    if record and ix == target_ix and iy == target_iy:
                        k = rec_n[0]
                        if k < rec_pow.shape[0]:
                            rec_pow[k] = p
                            rec_len[k] = length
                            rec_bnc[k] = bounces
                            rec_n[0] = k + 1
            if hit_idx >= 0:
                bounces += 1
                if bounces > max_bounces:
                    return
                pos_x += dx * t_hit
                pos_y += dy * t_hit
                pos_z += dz * t_hit
                wnx = seg_nx[hit_idx]
                wny = seg_ny[hit_idx]
                dot = dx * wnx + dy * wny
                cos_i = abs(dot)
                if cos_i > 1.0:
                    cos_i = 1.0
                m = seg_mat[hit_idx]
                gamma2 *= fresnel_power_mean(eps_arr[m], sig_arr[m], freq_hz, cos_i)
                if gamma2 < 1e-12:
                    return
                dx -= 2.0 * dot * wnx
                dy -= 2.0 * dot * wny
                dsv = (sv_x - pos_x) * wnx + (sv_y - pos_y) * wny
                sv_x -= 2.0 * dsv * wnx
                sv_y -= 2.0 * dsv * wny
                last_wall = hit_idx
                break
            # no wall: check roof absorption, band exit, then advance
            z_end = pos_z + dz * seg_end
            h_cell = bmap[iy, ix]
            if h_cell > 0.0:
                z_mid = pos_z + dz * 0.5 * (t_cursor + seg_end)
                if z_mid <= h_cell:
                    return
            if z_end < z_lo:
                return
            if t_max_x < t_max_y:
                t_max_x += t_delta_x
                ix += step_x
                if ix < 0 or ix >= nx:
                    return
            else:
                t_max_y += t_delta_y
                iy += step_y
                if iy < 0 or iy >= ny:
                    return
            t_cursor = t_exit


@njit(cache=True, parallel=True)
def trace_rays_grid(
    bmap, res, seg, seg_nx, seg_ny, seg_mat, eps_arr, sig_arr,
    cell_start, cell_walls,
    freq_hz, wavelength, max_bounces, enable_reflection,
    tx_x, tx_y, tx_z, z_lo, z_hi, rx_z,
    elevations_deg, n_az, az_jitter, d_omega,
    isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back, bs_az_deg, downtilt_deg,
):
    """Launch the full elevation-fan x azimuth ray grid and return the
    accumulated bounce-path power grid. One accumulation grid per
    elevation row, merged in row order, so results do not depend on the
    thread schedule."""
    ny, nx = bmap.shape
    nel = elevations_deg.shape[0]
    grids = np.zeros((nel, ny, nx), dtype=np.float64)
    dummy_f = np.zeros(1, dtype=np.float64)
    dummy_i = np.zeros(1, dtype=np.int64)
    for k in prange(nel):
        el_rad = elevations_deg[k] * np.pi / 180.0
        dz = np.sin(el_rad)
        if dz >= 0.0 or d_omega[k] <= 0.0:
            continue
        cos_el = np.cos(el_rad)
        dphi = 2.0 * np.pi / n_az
        for j in range(n_az):
            az = (j + az_jitter[k]) * dphi
            dx = cos_el * np.sin(az)
            dy = cos_el * np.cos(az)
            g = antenna_gain_linear(
                isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back,
                bs_az_deg, downtilt_deg, dx, dy, dz,
            )
            _trace_one_ray(
                bmap, res, seg, seg_nx, seg_ny, seg_mat, eps_arr, sig_arr,
                cell_start, cell_walls,
                freq_hz, wavelength, max_bounces, enable_reflection,
                tx_x, tx_y, tx_z, z_lo, z_hi, rx_z,
                dx, dy, dz, g, d_omega[k],
                grids[k],
                False, -1, -1, dummy_f, dummy_f, dummy_i, dummy_i,
            )
    out = np.zeros((ny, nx), dtype=np.float64)
    for k in range(nel):
        out += grids[k]
    return out


@njit(cache=True)
def trace_rays_probe(
    bmap, res, seg, seg_nx, seg_ny, seg_mat, eps_arr, sig_arr,
    cell_start, cell_walls,
    freq_hz, wavelength, max_bounces, enable_reflection,
    tx_x, tx_y, tx_z, z_lo, z_hi, rx_z,
    elevations_deg, n_az, az_jitter, d_omega,
    isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back, bs_az_deg, downtilt_deg,
    target_ix, target_iy, rec_pow, rec_len, rec_bnc,
):
    """Serial variant of trace_rays_grid recording every bounce-path
    contribution to one target pixel. Returns the number recorded."""
    ny, nx = bmap.shape
    accum = np.zeros((ny, nx), dtype=np.float64)
    rec_n = np.zeros(1, dtype=np.int64)
    nel = elevations_deg.shape[0]
    for k in range(nel):
        el_rad = elevations_deg[k] * np.pi / 180.0
        dz = np.sin(el_rad)
        if dz >= 0.0 or d_omega[k] <= 0.0:
            continue
        cos_el = np.cos(el_rad)
        dphi = 2.0 * np.pi / n_az
        for j in range(n_az):
            az = (j + az_jitter[k]) * dphi
            dx = cos_el * np.sin(az)
            dy = cos_el * np.cos(az)
            g = antenna_gain_linear(
                isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back,
                bs_az_deg, downtilt_deg, dx, dy, dz,
            )
            _trace_one_ray(
                bmap, res, seg, seg_nx, seg_ny, seg_mat, eps_arr, sig_arr,
                cell_start, cell_walls,
                freq_hz, wavelength, max_bounces, enable_reflection,
                tx_x, tx_y, tx_z, z_lo, z_hi, rx_z,
                dx, dy, dz, g, d_omega[k],
                accum,
                True, target_ix, target_iy, rec_pow, rec_len, rec_bnc, rec_n,
            )
    return rec_n[0]


@njit(cache=True, parallel=True)
def diffraction_power_map(
    bmap, res, los, tx_x, tx_y, tx_z, rx_z, wavelength,
    isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back, bs_az_deg, downtilt_deg,
):
    """Linear power grid of the dominant rooftop knife-edge path for every
    NLOS outdoor pixel (0 elsewhere)."""
    ny, nx = bmap.shape
    out = np.zeros((ny, nx), dtype=np.float64)
    four_pi = 4.0 * np.pi
    for iy in prange(ny):
        cy = (iy + 0.5) * res
        for ix in range(nx):
            if bmap[iy, ix] > 0.0 or los[iy, ix]:
                continue
            cx = (ix + 0.5) * res
            v, ex, ey, ez = knife_edge_profile(
                bmap, res, tx_x, tx_y, tx_z, cx, cy, rx_z, wavelength
            )
            if v <= -1e29:
                continue
            loss_db = knife_edge_loss_db(v)
            d1 = np.sqrt((ex - tx_x) ** 2 + (ey - tx_y) ** 2 + (ez - tx_z) ** 2)
            d2 = np.sqrt((cx - ex) ** 2 + (cy - ey) ** 2 + (rx_z - ez) ** 2)
            length = d1 + d2
            if length < 1e-9:
                continue
            g = antenna_gain_linear(
                isotropic, bs_gain_db, hpbw_az, hpbw_el, front_to_back,
                bs_az_deg, downtilt_deg, ex - tx_x, ey - tx_y, ez - tx_z,
            )
            amp = wavelength / (four_pi * length)
            out[iy, ix] = g * amp * amp * 10.0 ** (-loss_db / 10.0)
    return out
