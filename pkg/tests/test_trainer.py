import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from idqn import autodiff as ad
from idqn.checkpoint import VERSION, dumps, load_checkpoint, loads, save_checkpoint
from idqn.env import LayoutConfig, PelletWorld, parse_layout
from idqn.errors import CheckpointError, ConfigError, ContractError
from idqn.losses import LossWeights, compute_targets, total_loss
from idqn.model import IDQN, ModelConfig, q_values, encode
from idqn.trainer import (
    Adam,
    ReplayBuffer,
    TrainerConfig,
    Transition,
    evaluate,
    sync_target,
    train,
    train_step,
)

from conftest import TINY, TINY_LAYOUT, make_batch

TINY_TRAIN = TrainerConfig(batch_size=4, train_freq=2, target_sync=7, buffer_size=50, learning_starts=8, total_steps=60)
TINY_MODEL = ModelConfig(obs_shape=TINY_LAYOUT.obs_shape, n_keys=4, embed_dim=5, conv_layers=((3, 2, 2), (4, 3, 1)))


def transition(i, shape=(1, 2, 2)):
    return Transition(np.full(shape, float(i)), i % 4, float(i), np.full(shape, i + 0.5), i % 2 == 1)


# ---------------------------------------------------------------------------
# replay


def test_ring_evicts_oldest():
    buf = ReplayBuffer(3, (1, 2, 2))
    for i in range(4):
        buf.push(transition(i))
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [1.0, 2.0, 3.0]


def test_full_draw_is_permutation():
    buf = ReplayBuffer(5, (1, 2, 2))
    for i in range(5):
        buf.push(transition(i))
    b = buf.sample(5, np.random.default_rng(0))
    assert sorted(b.rewards.tolist()) == [0.0, 1.0, 2.0, 3.0, 4.0]
    np.testing.assert_array_equal(b.obs[:, 0, 0, 0], b.rewards)
    np.testing.assert_array_equal(b.actions, b.rewards.astype(int) % 4)


def test_underfilled_sample_rejected():
    buf = ReplayBuffer(4, (1, 2, 2))
    buf.push(transition(0))
    with pytest.raises(ContractError):
        buf.sample(2, np.random.default_rng(0))


def test_bad_transitions_rejected():
    buf = ReplayBuffer(4, (1, 2, 2))
    with pytest.raises(ContractError):
        buf.push(Transition(np.zeros((1, 2, 2)), 0, float("nan"), np.zeros((1, 2, 2)), False))
    with pytest.raises(ContractError):
        buf.push(Transition(np.zeros((1, 3, 2)), 0, 0.0, np.zeros((1, 2, 2)), False))


def test_sampling_frequencies_are_uniform():
    n, k, draws = 20, 4, 25_000
    buf = ReplayBuffer(n, (1, 1, 1))
    for i in range(n):
        buf.push(Transition(np.zeros((1, 1, 1)), 0, float(i), np.zeros((1, 1, 1)), False))
    rng = np.random.default_rng(11)
    counts = np.zeros(n)
    for _ in range(draws):
        b = buf.sample(k, rng)
        assert len(set(b.rewards.tolist())) == k
        counts += np.bincount(b.rewards.astype(int), minlength=n)
    assert counts.sum() == k * draws
    # 10^5 picks over 20 slots; p > 0.0027 is the 3-sigma acceptance region
    assert chisquare(counts).pvalue > 0.0027


def test_sampling_is_deterministic_in_rng():
    buf = ReplayBuffer(10, (1, 2, 2))
    for i in range(10):
        buf.push(transition(i))
    a = buf.sample(4, np.random.default_rng(3))
    b = buf.sample(4, np.random.default_rng(3))
    assert np.array_equal(a.rewards, b.rewards)


@settings(max_examples=50, deadline=None)
@given(cap=st.integers(1, 8), pushes=st.integers(0, 30))
def test_size_never_exceeds_capacity(cap, pushes):
    buf = ReplayBuffer(cap, (1, 2, 2))
    for i in range(pushes):
        buf.push(transition(i))
        assert len(buf) <= cap
    assert len(buf) == min(cap, pushes)
    if pushes:
        held = sorted(buf.rewards[: len(buf)].tolist())
        assert held == [float(i) for i in range(max(0, pushes - cap), pushes)]


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_matches_hand_recurrence():
    p = ad.Parameter(np.array([0.5]), "x")
    p.grad = np.array([0.3])
    opt = Adam(lr=0.01)
    opt.step([p])
    # m = 0.1 * 0.3, v = 0.001 * 0.09, mhat = 0.3, vhat = 0.09
    assert p.data[0] == pytest.approx(0.5 - 0.01 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    p.grad = np.array([-0.2])
    opt.step([p])
    m = 0.9 * 0.03 + 0.1 * -0.2
    v = 0.999 * 0.00009 + 0.001 * 0.04
    expected = 0.5 - 0.01 * 0.3 / (0.3 + 1e-8) - 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adam_zero_grad_is_noop():
    p = ad.Parameter(np.array([1.0, -2.0]), "x")
    p.grad = np.zeros(2)
    Adam(lr=0.1).step([p])
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_identical_inputs_identical_outputs():
    rng = np.random.default_rng(0)
    data, grads = rng.normal(size=(3, 4)), [rng.normal(size=(3, 4)) for _ in range(5)]
    outs = []
    for _ in range(2):
        p = ad.Parameter(data.copy(), "w")
        opt = Adam(lr=0.003)
        for g in grads:
            p.grad = g.copy()
            opt.step([p])
        outs.append(p.data)
    assert np.array_equal(*outs)


# ---------------------------------------------------------------------------
# train_step / sync


def test_zero_weights_leave_parameters_unchanged(tiny_model, tiny_batch):
    before = {n: p.data.copy() for n, p in tiny_model.params.items()}
    train_step(tiny_model, tiny_model.copy(), tiny_batch, TrainerConfig(batch_size=4), LossWeights(0, 0, 0, 0), Adam())
    assert all(np.array_equal(before[n], p.data) for n, p in tiny_model.params.items())


def test_clipping_bounds_global_norm(tiny_model, tiny_batch):
    cfg = TrainerConfig(batch_size=4, clip_norm=1e-3)
    target = tiny_model.copy()
    _, scale = train_step(tiny_model, target, tiny_batch, cfg, LossWeights(), Adam())
    assert scale < 1.0
    assert ad.global_grad_norm(tiny_model.parameters()) <= cfg.clip_norm + 1e-9


def env_batch(layout, n, seed=0):
    env, rng = PelletWorld(layout), np.random.default_rng(seed)
    buf = ReplayBuffer(n, layout.obs_shape)
    state, obs = env.reset(seed)
    while len(buf) < n:
        a = int(rng.integers(4))
        nxt, nobs, r, done = env.step(state, a)
        buf.push(Transition(obs, a, r, nobs, done))
        state, obs = env.reset(seed) if done else (nxt, nobs)
    return buf.get(np.arange(n))


def test_overfit_one_batch_down_to_the_entropy_floor():
    # with the target network frozen, cross entropy cannot drop below the
    # entropy of its projected targets; everything above that floor must go
    model = IDQN.init(TINY_MODEL, 0)
    target = model.copy()
    batch = env_batch(TINY_LAYOUT, 16)
    cfg = TrainerConfig(batch_size=16, lr=1e-3)
    opt = Adam.from_config(cfg)
    proj = compute_targets(target, batch, cfg.gamma).projected
    floor = float(np.mean(-(proj * np.log(proj + 1e-12)).sum(axis=1)))
    initial = total_loss(batch, model, target, LossWeights(), cfg.gamma).total
    for _ in range(500):
        train_step(model, target, batch, cfg, LossWeights(), opt)
    final = total_loss(batch, model, target, LossWeights(), cfg.gamma)
    assert final.distributional >= floor - 1e-9
    assert final.total - floor < 0.05 * (initial - floor)


def test_sync_target_copies_and_detaches(tiny_model):
    obs = np.random.default_rng(2).uniform(0, 1, (6,) + TINY.obs_shape)
    target = tiny_model.copy()
    assert np.array_equal(q_values(target, encode(target, obs)), q_values(tiny_model, encode(tiny_model, obs)))
    tiny_model.keys.data = tiny_model.keys.data + 1.0
    sync_target(tiny_model, target)
    assert all(np.array_equal(p.data, target.params[n].data) for n, p in tiny_model.params.items())
    tiny_model.keys.data = tiny_model.keys.data + 1.0
    assert not np.array_equal(tiny_model.keys.data, target.keys.data)


# ---------------------------------------------------------------------------
# evaluation


def test_zero_pellet_layout_returns_zero():
    lay = LayoutConfig(width=2, height=2, n_pellets=0, cell_px=4)
    model = IDQN.init(TINY_MODEL, 0)
    mean, rets = evaluate(model, PelletWorld(lay), 3, 0.01)
    assert mean == 0.0 and rets == [0.0, 0.0, 0.0]


def test_eval_is_repeatable_and_bounded():
    model = IDQN.init(TINY_MODEL, 1)
    a = evaluate(model, PelletWorld(TINY_LAYOUT), 4, 0.01, seed=2)
    b = evaluate(model, PelletWorld(TINY_LAYOUT), 4, 0.01, seed=2)
    assert a == b
    assert all(0 <= r <= TINY_LAYOUT.n_pellets for r in a[1])


def test_eval_rejects_zero_episodes():
    with pytest.raises(ConfigError):
        evaluate(IDQN.init(TINY_MODEL, 0), PelletWorld(TINY_LAYOUT), 0, 0.0)


# ---------------------------------------------------------------------------
# training loop


def test_training_is_bit_reproducible(tmp_path):
    runs = []
    for k in range(2):
        res = train(TINY_LAYOUT, TINY_TRAIN, LossWeights(), seed=3, model_config=TINY_MODEL, metrics_path=tmp_path / f"m{k}.csv")
        runs.append(res)
    assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()
    assert runs[0].metrics.to_csv() == (tmp_path / "m0.csv").read_text()
    assert dumps(runs[0].checkpoint) == dumps(runs[1].checkpoint)


def test_metrics_header_and_rows():
    res = train(TINY_LAYOUT, TINY_TRAIN, LossWeights(), seed=0, model_config=TINY_MODEL)
    lines = res.metrics.to_csv().splitlines()
    assert lines[0] == "step,episode,return,bellman,distrib,reconstruct,diversity,total,grad_scale"
    updates = [r for r in res.metrics.rows if r[3]]
    expected = [t for t in range(1, 61) if t % 2 == 0 and t >= 8]
    assert [int(r[0]) for r in updates] == expected
    assert all(float(r[8]) <= 1.0 for r in updates)
    episodes = [r for r in res.metrics.rows if r[2]]
    assert [float(r[2]) for r in episodes] == res.episode_returns


def test_target_changes_only_at_sync_points():
    cfg = TrainerConfig(batch_size=4, train_freq=1, target_sync=5, buffer_size=50, learning_starts=4, total_steps=12)
    a = train(TINY_LAYOUT, cfg, LossWeights(), seed=0, model_config=TINY_MODEL)
    b = train(TINY_LAYOUT, TrainerConfig(**{**cfg.__dict__, "total_steps": 10}), LossWeights(), seed=0, model_config=TINY_MODEL)
    # steps 11 and 12 update the online net but are not sync points
    assert all(np.array_equal(a.target_model.params[n].data, b.target_model.params[n].data) for n in a.target_model.params)
    assert not np.array_equal(a.checkpoint.model.keys.data, a.target_model.keys.data)
    assert all(np.array_equal(b.checkpoint.model.params[n].data, b.target_model.params[n].data) for n in b.target_model.params)


def test_obs_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        train(LayoutConfig(), TINY_TRAIN, LossWeights(), seed=0, model_config=TINY_MODEL)


@pytest.mark.parametrize(
    "kwargs",
    [{"gamma": 1.5}, {"batch_size": 0}, {"lr": 0.0}, {"beta1": 1.0}, {"epsilon": 2.0}, {"batch_size": 64, "buffer_size": 32}],
)
def test_invalid_trainer_configs(kwargs):
    with pytest.raises(ConfigError):
        TrainerConfig(**kwargs)


def test_epsilon_flag_changes_behaviour():
    greedy = train(TINY_LAYOUT, TINY_TRAIN, LossWeights(), seed=0, model_config=TINY_MODEL)
    eps = train(TINY_LAYOUT, TrainerConfig(**{**TINY_TRAIN.__dict__, "epsilon": 1.0}), LossWeights(), seed=0, model_config=TINY_MODEL)
    assert greedy.metrics.to_csv() != eps.metrics.to_csv()


# ---------------------------------------------------------------------------
# checkpoints


@pytest.fixture(scope="module")
def trained():
    return train(TINY_LAYOUT, TINY_TRAIN, LossWeights(), seed=4, model_config=TINY_MODEL).checkpoint


def test_checkpoint_round_trip_exact(tmp_path, trained):
    path = tmp_path / "c.idqn"
    save_checkpoint(trained, path)
    back = load_checkpoint(path)
    obs = np.random.default_rng(0).uniform(0, 1, (100,) + TINY_LAYOUT.obs_shape)
    assert np.array_equal(q_values(back.model, encode(back.model, obs)), q_values(trained.model, encode(trained.model, obs)))
    assert back.model_config == trained.model_config
    assert back.trainer_config == trained.trainer_config
    assert back.layout == trained.layout
    assert back.optimizer.t == trained.optimizer.t
    assert all(np.array_equal(back.optimizer.m[n], trained.optimizer.m[n]) for n in trained.optimizer.m)
    assert back.rng_state == trained.rng_state
    assert dumps(back) == dumps(trained)


def test_checkpoint_header(trained):
    raw = dumps(trained)
    assert raw[:4] == b"IDQN" and int.from_bytes(raw[4:8], "little") == VERSION


def test_truncated_checkpoint(trained):
    raw = dumps(trained)
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError):
            loads(raw[:cut])


def test_version_bump_rejected(trained):
    raw = bytearray(dumps(trained))
    raw[4:8] = (VERSION + 1).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        loads(bytes(raw))


def test_bad_magic_and_missing_file(tmp_path, trained):
    with pytest.raises(CheckpointError):
        loads(b"NOPE" + dumps(trained)[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.idqn")


def test_checkpoint_keeps_custom_layout():
    lay = parse_layout("A . \n .# \n", cell_px=4)
    mc = ModelConfig(obs_shape=lay.obs_shape, n_keys=3, embed_dim=4, conv_layers=((3, 2, 2),))
    cfg = TrainerConfig(batch_size=2, buffer_size=10, learning_starts=2, total_steps=6)
    ck = train(lay, cfg, LossWeights(), seed=0, model_config=mc).checkpoint
    assert loads(dumps(ck)).layout == lay
