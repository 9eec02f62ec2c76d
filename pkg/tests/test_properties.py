"""Property-based checks of invariants that hold for any input, not just the bundled scenarios."""
import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oosdetect.detect import dumps_report, falling_zero
from oosdetect.energetics import lpe_integral
from oosdetect.netmodel import StageNetwork, build_admittance, initialize, kron_reduce
from oosdetect.simcore import derivatives, to_coi_frame
from oosdetect.twomach import CosineModel, CosineTerm, proposition1_check, sep_eigen, wrap_angle

SETTINGS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])

angle = st.floats(-math.pi, math.pi, allow_nan=False)
amp = st.floats(0.01, 20.0, allow_nan=False)
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def _model(pc, gc, pl, gl, ms=1.0, ma=3.0):
    z = CosineTerm(0.0, 0.0, 0.0)
    return CosineModel(LS=z, LA=z, C=CosineTerm.zero_at_origin(pc, gc), L2=CosineTerm.zero_at_origin(pl, gl),
                       M_S=ms, M_A=ma)


@pytest.fixture(scope="module")
def ieee_net(ieee39):
    adm = build_admittance(ieee39)
    op = initialize(ieee39, adm)
    return ieee39, adm, op


@SETTINGS
@given(d=arrays(float, 10, elements=finite), w=arrays(float, 10, elements=finite),
       M=arrays(float, 10, elements=st.floats(0.01, 10.0)), shift=finite)
def test_coi_projection(d, w, M, shift):
    dc, wc = to_coi_frame(d, w, M)
    scale = 1.0 + np.abs(d).max() + np.abs(w).max()
    assert abs(dc @ M) <= 1e-9 * scale * M.sum()
    assert abs(wc @ M) <= 1e-9 * scale * M.sum()
    # idempotent and blind to a common rotation
    np.testing.assert_allclose(to_coi_frame(dc, wc, M)[0], dc, atol=1e-9 * scale)
    np.testing.assert_allclose(to_coi_frame(d + shift, w, M)[0], dc, atol=1e-9 * (scale + abs(shift)))


@SETTINGS
@given(phases=arrays(float, 10, elements=angle))
def test_swing_acceleration_has_no_coi_component(ieee_net, phases):
    case, adm, op = ieee_net
    net = StageNetwork(case, adm, op)
    _, dw, _, _ = derivatives(phases, np.zeros(10), net, op.pm, case.inertia)
    assert abs(case.inertia @ dw) <= 1e-10 * np.abs(case.inertia * dw).sum()


@SETTINGS
@given(phases=arrays(float, 10, elements=angle))
def test_reduction_reproduces_sparse_full_solve(ieee_net, phases):
    case, adm, op = ieee_net
    red = kron_reduce(adm, case, op.load_y)
    E = op.emag * np.exp(1j * phases)
    diag = np.zeros(case.n_bus, dtype=complex)
    yg = np.array([1 / (1j * g.xd_prime) for g in case.generators])
    np.add.at(diag, case.gen_bus_rows, yg)
    np.add.at(diag, case.load_bus_rows, op.load_y)
    A = sp.csc_matrix(adm.Y) + sp.diags(diag)
    rhs = np.zeros(case.n_bus, dtype=complex)
    rhs[case.gen_bus_rows] = yg * E
    V = spla.spsolve(A, rhs)
    rows = [case.bus_index[b] for b in red.bus_ids]
    np.testing.assert_allclose(red.load_voltages(E), V[rows], atol=1e-8)


@SETTINGS
@given(pm=amp, g=angle, d=st.floats(-10, 10))
def test_cosine_term_derivative(pm, g, d):
    term = CosineTerm.zero_at_origin(pm, g)
    assert abs(term(0.0)) <= 1e-12 * pm
    h = 1e-6
    fd = (term(d + h) - term(d - h)) / (2 * h)
    assert fd == pytest.approx(float(term.derivative(d)), abs=1e-6 * pm)


@SETTINGS
@given(b=amp, s0=st.floats(-1.0, 1.0), span=st.floats(0.1, 3.0))
def test_lossless_line_lpe_closed_form(b, s0, span):
    sigma = np.linspace(s0, s0 + span, 4001)
    lpe = lpe_integral(b * np.sin(sigma), b * math.sin(s0), sigma)
    exact = b * (math.cos(s0) - np.cos(sigma)) - b * math.sin(s0) * (sigma - s0)
    np.testing.assert_allclose(lpe, exact, atol=1e-6 * b * (1 + span) ** 3)


@SETTINGS
@given(pc=amp, gc=angle, pl=st.floats(0.0, 20.0), gl=angle)
def test_eigen_dichotomy(pc, gc, pl, gl):
    m = _model(pc, gc, pl, gl)
    r = sep_eigen(m)
    assert (r.lam[0] ** 2) == pytest.approx(-r.df0, abs=1e-9 * (pc + pl))
    if r.df0 > 1e-12:
        assert r.verdict == "stable-oscillatory" and r.lam[0].real == 0
    elif r.df0 < -1e-12:
        assert r.verdict == "unstable" and r.lam[0].real > 0


@SETTINGS
@given(pc=amp, gc=angle, pl=st.floats(0.0, 20.0), gl=angle)
def test_proposition1_certificate_sound(pc, gc, pl, gl):
    m = _model(pc, gc, pl, gl)
    r = proposition1_check(m)
    if r.holds:
        assert 0.0 < r.root <= -2 * m.C.gamma + 1e-12
        assert abs(m.f(r.root)) <= 1e-8 * (pc + pl)
        a, b = r.interval
        assert m.f(a) * m.f(b) <= 0.0
    else:
        assert r.failed and r.root is None


@SETTINGS
@given(slope=st.floats(-50, -0.01), x0=st.floats(0.05, 0.95))
def test_falling_zero_exact_on_lines(slope, x0):
    t = np.linspace(0, 1, 1001)
    hit = falling_zero(slope * (t - x0), t, np.ones_like(t), 0, 1000)
    k, a = hit
    assert t[k] + a * (t[1] - t[0]) == pytest.approx(x0, abs=1e-9)


@SETTINGS
@given(x=st.floats(-100, 100))
def test_wrap_angle_range(x):
    w = wrap_angle(x)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(x), abs=1e-9)
    assert math.sin(w) == pytest.approx(math.sin(x), abs=1e-9)


json_scalars = st.one_of(st.floats(allow_nan=False, allow_infinity=False, width=64), st.integers(-10**6, 10**6),
                         st.booleans(), st.text(max_size=5), st.none())
json_docs = st.recursive(json_scalars, lambda c: st.lists(c, max_size=4) | st.dictionaries(st.text(max_size=4), c, max_size=4),
                         max_leaves=20)


@SETTINGS
@given(doc=st.dictionaries(st.text(max_size=4), json_docs, max_size=5))
def test_report_json_canonical(doc):
    s = dumps_report(doc)
    assert dumps_report(json.loads(s)) == s
    assert s == dumps_report(dict(reversed(list(doc.items()))))
