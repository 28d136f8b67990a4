import numpy as np
import pytest

from xappdistill import nn
from xappdistill.agents import DISTILLED, XAPP1, XAPP2, XApp, features, full_layout
from xappdistill.distill import (HeuristicTeacher, argmax_agreement, collect_experience, distill,
                                 evaluate, kl_batch, load_buffer, loss_non_increasing, run_xapps,
                                 save_buffer)
from xappdistill.env import CellularEnv, EnvParams
from xappdistill.metrics import DEFAULT_THRESHOLDS
from xappdistill.mitigation import MitigationPolicy

P = EnvParams()


def random_teachers(seed=0):
    rng = np.random.default_rng(seed)
    return [XApp(s, nn.init((P.obs_width, 20, 20), s.layout(P), rng), P) for s in (XAPP1, XAPP2)]


def env(seed=0):
    return CellularEnv(P, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def buffer():
    return collect_experience(random_teachers(), env(1), 600)


# -- collection --------------------------------------------------------------

def test_collect_zero_steps():
    assert len(collect_experience(random_teachers(), env(), 0)) == 0


def test_collect_split_per_teacher():
    buf = collect_experience(random_teachers(), env(), 10_000)
    tags = [buf.sources[i] for i in buf.source[buf.ordered_slots()]]
    assert tags.count("xapp1") == 5000 and tags.count("xapp2") == 5000


def test_stored_q_matches_teacher(buffer):
    teachers = {t.name: t for t in random_teachers()}
    lay = buffer.layout
    for i in range(0, len(buffer), 37):
        tr = buffer[i]
        t = teachers[tr.source_xapp]
        q = t.q_values(tr.observation)
        for h in t.layout:
            np.testing.assert_array_equal(tr.teacher_q[lay.slice(h.name)], q[t.layout.slice(h.name)])
            assert tr.action_indices[lay.position(h.name)] == np.argmax(q[t.layout.slice(h.name)])
        absent = [h for h in lay if h.name not in t.layout]
        assert all(np.isnan(tr.teacher_q[lay.slice(h.name)]).all() for h in absent)
        assert all(tr.action_indices[lay.position(h.name)] == -1 for h in absent)


def test_collect_rejects_width_mismatch():
    bad = XApp(XAPP1, nn.init((P.obs_width, 4), XAPP1.layout(P), np.random.default_rng(0)), P)
    bad.net = nn.init((P.obs_width + 2, 4), XAPP1.layout(P), np.random.default_rng(0))
    with pytest.raises(ValueError, match="inputs"):
        collect_experience([bad], env(), 10)


def test_buffer_file_round_trip(buffer, tmp_path):
    path = tmp_path / "b.xbuf"
    save_buffer(buffer, path)
    back = load_buffer(path)
    assert len(back) == len(buffer) and back.layout == buffer.layout
    s1, s2 = buffer.ordered_slots(), back.ordered_slots()
    np.testing.assert_array_equal(back.obs[s2], buffer.obs[s1])
    np.testing.assert_array_equal(back.teacher_q[s2], buffer.teacher_q[s1])
    np.testing.assert_array_equal(back.actions[s2], buffer.actions[s1])
    save_buffer(back, tmp_path / "c.xbuf")
    assert path.read_bytes() == (tmp_path / "c.xbuf").read_bytes()


# -- KL over heads -----------------------------------------------------------

def test_kl_batch_matches_per_head_loss(buffer):
    student = nn.init((P.obs_width, 20), full_layout(P), np.random.default_rng(3))
    slots = buffer.ordered_slots()[:16]
    out, _ = nn.forward_batch(student, features(buffer.obs[slots], P))
    tq = buffer.teacher_q[slots]
    loss, grad = kl_batch(tq, out, buffer.layout, 20.0)
    ref = 0.0
    ref_grad = np.zeros_like(out)
    for r in range(16):
        for h in buffer.layout:
            sl = buffer.layout.slice(h.name)
            if np.isnan(tq[r, sl]).any():
                continue
            l_, g_ = nn.kl_loss(tq[r, sl], out[r, sl], 20.0)
            ref += l_
            ref_grad[r, sl] = g_ / 16
    assert loss == pytest.approx(ref / 16, rel=1e-12)
    np.testing.assert_allclose(grad, ref_grad, atol=1e-15)


def test_head_routing(buffer):
    lay = buffer.layout
    src = np.array([buffer.sources[i] for i in buffer.source[buffer.ordered_slots()]])
    student = nn.init((P.obs_width, 20), full_layout(P), np.random.default_rng(4))
    for name, silent, shared in (("xapp1", "pw_", "ho_"), ("xapp2", "rb_", "ho_")):
        slots = buffer.ordered_slots()[src == name][:32]
        out, acts = nn.forward_batch(student, features(buffer.obs[slots], P))
        _, grad = kl_batch(buffer.teacher_q[slots], out, lay, 20.0)
        for h in lay:
            g = grad[:, lay.slice(h.name)]
            if h.name.startswith(silent):
                assert np.all(g == 0)
            elif h.name.startswith(shared):
                assert np.any(g != 0)
        head_grads = nn.backward(student, acts, grad)
        gw = head_grads[-2]
        for h in lay:
            if h.name.startswith(silent):
                assert np.all(gw[:, lay.slice(h.name)] == 0)


def test_student_preset_to_teacher_has_zero_loss():
    teacher = random_teachers(5)[0]
    buf = collect_experience([teacher], env(2), 200)
    lay = full_layout(P)
    student = nn.init((P.obs_width, 20, 20), lay, np.random.default_rng(9))
    for w_s, w_t in zip(student.weights[:-1] + student.biases[:-1],
                        teacher.net.weights[:-1] + teacher.net.biases[:-1]):
        w_s[...] = w_t
    for h in teacher.layout:
        w_t, b_t = teacher.net.head_params(h.name)
        sl = lay.slice(h.name)
        student.weights[-1][:, sl] = w_t / 20.0
        student.biases[-1][sl] = b_t / 20.0
    slots = buf.ordered_slots()
    out, _ = nn.forward_batch(student, features(buf.obs[slots], P))
    loss, grad = kl_batch(buf.teacher_q[slots], out, buf.layout, 20.0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_distill_rejects_missing_student_head(buffer):
    student = nn.init((P.obs_width, 20), XAPP1.layout(P), np.random.default_rng(0))
    with pytest.raises(ValueError, match="student head"):
        distill(buffer, student, P, epochs=1)


def test_distill_rejects_bad_temperature(buffer):
    student = nn.init((P.obs_width, 20), full_layout(P), np.random.default_rng(0))
    with pytest.raises(ValueError, match="temperature"):
        distill(buffer, student, P, tau=0.0, epochs=1)


def test_distillation_beats_untrained_student():
    teachers = [HeuristicTeacher(XAPP1, P), HeuristicTeacher(XAPP2, P)]
    buf = collect_experience(teachers, env(3), 2000)
    rng = np.random.default_rng(0)
    untrained = nn.init((P.obs_width, 50, 100), full_layout(P), rng)
    res = distill(buf, untrained.copy(), P, tau=20.0, epochs=15, lr=0.1,
                  rng=np.random.default_rng(1))
    before = argmax_agreement(buf, untrained, P, res.holdout_idx)
    assert len(res.holdout_idx) == 200
    assert set(res.agreement) == set(full_layout(P).names)
    assert np.mean(list(res.agreement.values())) > np.mean(list(before.values()))
    assert all(res.agreement[h] >= before[h] for h in res.agreement)
    assert loss_non_increasing(res.loss_curve)


def test_distill_deterministic(buffer):
    runs = [distill(buffer, nn.init((P.obs_width, 20), full_layout(P), np.random.default_rng(0)),
                    P, epochs=2, rng=np.random.default_rng(1)) for _ in range(2)]
    assert runs[0].loss_curve == runs[1].loss_curve
    assert all(np.array_equal(a, b) for a, b in zip(runs[0].student.params(), runs[1].student.params()))


def test_loss_non_increasing_rule():
    assert loss_non_increasing([5, 4, 3, 2, 1])
    assert loss_non_increasing([1.0, 1.0005, 0.9])
    assert not loss_non_increasing([1, 1, 1, 1, 1, 2, 2, 2, 2, 2])
    assert loss_non_increasing([1.0, 0.5, 0.6, 0.4, 0.3, 0.35, 0.2], window=3)
    assert loss_non_increasing([])


# -- evaluation --------------------------------------------------------------

def test_single_distilled_xapp_never_conflicts():
    student = XApp(DISTILLED, nn.init((P.obs_width, 20), full_layout(P), np.random.default_rng(0)), P)
    tr = run_xapps([student], env(4), 300, MitigationPolicy(("distilled",)))
    assert tr.arbiter.direct_conflicts == 0
    assert tr.arbiter.interrupts == tr.arbiter.rollbacks


def test_evaluate_outputs_and_determinism():
    teachers = random_teachers(2)
    m1 = evaluate(teachers, env(5), 400, policy=MitigationPolicy(), scheme="individual")
    m2 = evaluate(teachers, env(5), 400, policy=MitigationPolicy(), scheme="individual")
    assert m1.thresholds == list(DEFAULT_THRESHOLDS) and len(m1.thresholds) == 20
    assert m1.outage == m2.outage and m1.pdf == m2.pdf
    assert m1.rates.shape == (400, 5) and m1.steps == 400
    assert m1.direct_conflicts > 0
    assert np.array_equal(m1.rates, m2.rates)


def test_outage_at_zero_threshold():
    m = evaluate(random_teachers(3)[:1], env(6), 200, thresholds=[0.0, 10.0])
    assert m.outage[0] == 0.0


def test_evaluation_resets_each_episode():
    p = EnvParams(episode_len=10)
    teacher = HeuristicTeacher(XAPP1, p)
    xapp = XApp(XAPP1, nn.init((p.obs_width, 4), XAPP1.layout(p), np.random.default_rng(0)), p)
    e = CellularEnv(p, np.random.default_rng(0))
    run_xapps([xapp], e, 35, None)
    # 35 logged steps with resets at 10, 20, 30
    assert e.state.step_index == 5
    assert teacher.act(e.observation()).shape == (10,)
