import io
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaos_spde.cli import run
from chaos_spde.config import BConf, ConfigError, ExperimentConfig, NoiseConf, dump_config, parse_config
from chaos_spde.noise import NoiseSpec, m_tilde_parseval

SMALL = """\
N = 2
n = 4
M = 64
Q = 4
K_steps = 4
mc_samples = 1500
x_points = 8
sample_rows = 3
report_times = 5
"""


def _run(args, cfg_text=SMALL, tmp_path=None):
    path = tmp_path / "exp.cfg"
    path.write_text(cfg_text)
    out = io.StringIO()
    code = run([*args, "--config", str(path)], stdout=out)
    return code, out.getvalue()


def _table(text):
    lines = text.rstrip("\n").split("\n")
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


# ------------------------------------------------------------------ config


def test_default_config_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_parse_example():
    cfg = parse_config(
        "# comment\nT = 2.0\nnoise.1.kind = fractional\nnoise.1.H = 0.75\n"
        "B.1.kind = multiplier\nB.1.h_cos = 1.0, 0.3\nu0.sin = 1.0, 0.5\nr = 1\n"
    )
    assert cfg.T == 2.0 and cfg.noises == (NoiseConf("fractional", H=0.75),)
    assert cfg.B == (BConf("multiplier", h_cos=(1.0, 0.3)),)
    assert cfg.noise_specs() == [NoiseSpec.fractional(0.75, 2.0)]
    assert cfg.initial_field().Q == cfg.Q


@pytest.mark.parametrize(
    "text",
    [
        "bogus = 1\n",
        "noise.1.kind = white\nnoise.1.color = red\nr = 1\nB.1.kind = diagonal\n",
        "noise.2.kind = white\n",
        "N = four\n",
        "N = 1\nN = 2\n",
        "just text\n",
        "noise.1.kind = pink\nB.1.kind = diagonal\nr = 1\n",
        "r = 3\n",
        "c0 = 2\n",
        "noise.1.kind = fractional\nnoise.1.H = 0.4\nB.1.kind = diagonal\nr = 1\n",
        "u0.sin = 0\n",
        "seed = -1\n",
    ],
)
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


floats = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    L = draw(st.integers(1, 3))
    noises = tuple(
        draw(
            st.one_of(
                st.just(NoiseConf("white")),
                st.builds(NoiseConf, st.just("ou"), st.floats(0.01, 5)),
                st.builds(lambda H: NoiseConf("fractional", H=H), st.floats(0.51, 0.99)),
            )
        )
        for _ in range(L)
    )
    Bs = tuple(
        draw(
            st.one_of(
                st.builds(lambda s: BConf("diagonal", sigma=s), floats),
                st.builds(
                    lambda c, s: BConf("multiplier", h_cos=(1.0, *c), h_sin=s),
                    st.lists(floats, max_size=3).map(tuple),
                    st.lists(floats, max_size=3).map(tuple),
                ),
            )
        )
        for _ in range(L)
    )
    return ExperimentConfig(
        T=draw(st.floats(0.01, 10)),
        N=draw(st.integers(0, 6)),
        n=draw(st.integers(1, 64)),
        r=draw(st.integers(1, L)),
        seed=draw(st.integers(0, 2**64 - 1)),
        c0=draw(st.floats(-5, 1)),
        noises=noises,
        B=Bs,
        u0_sin=(1.0, *draw(st.lists(floats, max_size=3))),
        sweep_values=tuple(draw(st.lists(st.integers(1, 9).map(float), max_size=4))),
    ).validate()


@settings(max_examples=60, deadline=None)
@given(configs())
def test_config_round_trip_property(cfg):
    text = dump_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert dump_config(again) == text


# --------------------------------------------------------------------- cli


def test_moments_rows(tmp_path):
    code, text = _run(["moments"], tmp_path=tmp_path)
    assert code == 0 and "\r" not in text and text.endswith("\n")
    header, rows = _table(text)
    assert header == ["t", "second_moment", "level_0", "level_1", "level_2", "mean_field_norm", "bound_3_18"]
    assert float(rows[0][1]) == pytest.approx(math.pi, rel=1e-15)
    for row in rows:
        assert float(row[-1]) >= float(row[1])


def test_moments_diagonal_closed_form(tmp_path):
    cfg = SMALL + "noise.1.kind = white\nB.1.kind = diagonal\nB.1.sigma = 0.5\nr = 1\nM = 512\n"
    cfg = cfg.replace("M = 64\n", "")
    code, text = _run(["moments"], cfg, tmp_path)
    assert code == 0
    _, rows = _table(text)
    for row in rows:
        t = float(row[0])
        V = m_tilde_parseval(NoiseSpec.white(), 4, t)
        expect = math.pi * math.exp(-2 * t) * sum(0.25**k * V**k / math.factorial(k) for k in range(3))
        assert float(row[1]) == pytest.approx(expect, rel=1e-5)


def test_reals_use_seventeen_digits(tmp_path):
    _, text = _run(["moments"], tmp_path=tmp_path)
    assert text.split("\n")[1].split(",")[1] == "%.17g" % math.pi


def test_sample_statistics(tmp_path):
    code, text = _run(["sample"], SMALL.replace("mc_samples = 1500", "mc_samples = 20000"), tmp_path)
    assert code == 0
    header, rows = _table(text)
    assert header[0] == "sample_id" and len(header) == 9
    named = {row[0]: np.array(row[1:], float) for row in rows}
    assert [row[0] for row in rows[1:4]] == ["0", "1", "2"]
    np.testing.assert_allclose(named["x"], 2 * np.pi * np.arange(8) / 8)
    # exact mean is the heat solution e^{-T} sin x
    np.testing.assert_allclose(named["exact_mean"], math.exp(-1) * np.sin(named["x"]), atol=1e-12)
    assert np.abs(named["mean"] - named["exact_mean"]).max() < 0.01
    assert np.abs(named["variance"] - named["exact_variance"]).max() < 0.01


def test_multistep_single_step_matches_moments(tmp_path):
    cfg = SMALL.replace("K_steps = 4", "K_steps = 1")
    _, mom = _run(["moments"], cfg, tmp_path)
    code, ms = _run(["multistep"], cfg, tmp_path)
    assert code == 0
    header, rows = _table(ms)
    assert header == ["j", "t_j", "mc_moment", "mc_stderr", "exact_moment", "bound_4_45", "bound_4_45_printed"]
    assert float(rows[-1][4]) == pytest.approx(float(_table(mom)[1][-1][1]), rel=1e-14)


def test_multistep_mc_agrees_with_exact(tmp_path):
    cfg = SMALL.replace("mc_samples = 1500", "mc_samples = 10000")
    _, text = _run(["multistep"], cfg, tmp_path)
    _, rows = _table(text)
    for row in rows[1:]:
        mc, se, ex = float(row[2]), float(row[3]), float(row[4])
        assert abs(mc - ex) <= 3 * se


def test_multistep_non_diagonal_leaves_exact_blank(tmp_path):
    cfg = SMALL + "noise.1.kind = white\nB.1.kind = multiplier\nB.1.h_cos = 1.0, 0.3\nr = 1\n"
    code, text = _run(["multistep"], cfg, tmp_path)
    assert code == 0
    _, rows = _table(text)
    assert all(row[4] == "" for row in rows)


@pytest.mark.parametrize("axis", ["N", "n", "r", "tau"])
def test_sweep_has_slope_footer(axis, tmp_path):
    cfg = SMALL + "sweep.values = 1, 2, 4\n" if axis != "r" else SMALL
    code, text = _run(["sweep", "--axis", axis], cfg, tmp_path)
    assert code == 0
    header, rows = _table(text)
    assert header[:3] == ["axis_value", "measured_tail", "theoretical_bound"]
    assert rows[-1][0] == "fitted_slope"
    for row in rows[:-1]:
        if row[2]:
            assert float(row[1]) <= float(row[2])


def test_validate_basis_rows(tmp_path):
    code, text = _run(["validate-basis"], tmp_path=tmp_path)
    assert code == 0
    header, rows = _table(text)
    assert header == ["check_name", "residual", "tolerance", "pass"]
    named = {row[0]: row for row in rows}
    assert float(named["gram_matrix"][1]) < 1e-7
    assert named["m_tilde_closed_form_ou(b=2)"][3] == "true"
    assert named["fractional_slope_fractional(H=0.75)"][3] == "true"


@pytest.mark.parametrize("cmd", [["moments"], ["sample"], ["multistep"], ["sweep", "--axis", "tau"]])
def test_byte_identical_across_runs_and_threads(cmd, tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(SMALL)
    outs = []
    for threads in ("1", "1", "3"):
        target = tmp_path / f"out{len(outs)}.csv"
        assert run([*cmd, "--config", str(path), "--out", str(target), "--threads", threads]) == 0
        outs.append(target.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_seed_flag_changes_samples(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(SMALL)
    a, b = io.StringIO(), io.StringIO()
    run(["sample", "--config", str(path), "--seed", "1"], stdout=a)
    run(["sample", "--config", str(path), "--seed", "2"], stdout=b)
    assert a.getvalue() != b.getvalue()


def test_exit_codes(tmp_path):
    assert _run(["moments"], "bogus = 1\n", tmp_path)[0] == 2
    assert run(["moments", "--config", str(tmp_path / "missing.cfg")], stdout=io.StringIO()) == 4
    assert _run(["moments"], SMALL + "enum_limit = 5\n", tmp_path)[0] == 3
    path = tmp_path / "exp.cfg"
    path.write_text(SMALL)
    assert run(["moments", "--config", str(path), "--out", str(tmp_path / "no" / "dir.csv")]) == 4
    assert run(["sweep", "--config", str(path)], stdout=io.StringIO()) == 2
    assert run(["moments", "--config", str(path), "--threads", "0"], stdout=io.StringIO()) == 2
    tau_mult = SMALL + "noise.1.kind = white\nB.1.kind = multiplier\nB.1.h_cos = 1.0\nr = 1\n"
    assert _run(["sweep", "--axis", "tau"], tau_mult, tmp_path)[0] == 2


def test_log_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CHAOS_SPDE_LOG", "loud")
    assert _run(["moments"], tmp_path=tmp_path)[0] == 2
    monkeypatch.setenv("CHAOS_SPDE_LOG", "info")
    assert _run(["moments"], tmp_path=tmp_path)[0] == 0
    assert "moments: |J|" in capsys.readouterr().err


def test_console_script(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(SMALL)
    proc = subprocess.run(
        [sys.executable, "-m", "chaos_spde.cli", "moments", "--config", str(path)],
        capture_output=True, text=True, env={**os.environ, "CHAOS_SPDE_LOG": "off"},
    )
    assert proc.returncode == 0 and proc.stdout.startswith("t,second_moment")
