import ast
import gc
import inspect
import types
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import fzsl.fed.server as server
from fzsl.config import desk_config
from fzsl.data import ClientPartition, Dataset, SyntheticSpec, make_synthetic
from fzsl.errors import InvalidArgument, NumericFailure
from fzsl.fed import (
    aggregate,
    broadcast,
    local_train,
    make_partitions,
    payload_size,
    pretrain_local_classifier,
    run_federation,
    select_clients,
    train_centralized,
    transmitted_params,
)
from fzsl.fed.client import ClientState
from fzsl.fed.orchestrator import initial_model
from fzsl.gan import GanModel, gan_init
from fzsl.numerics import LinearParams, adam_init
from fzsl.rng import SERVER_ID, RngStream, derive_rng


def tiny_config(**kw):
    base = dict(rounds=2, hidden_dim=16, batch_size=16, cls_pretrain_epochs=2, n_critic=2, ska=False)
    base.update(kw)
    return desk_config(**base)


def random_models(k, seed=0, dims=(6, 4, 4, 4, 8)):
    d, m, cond, noise, hidden = dims
    return [gan_init(d, m, cond, noise, hidden, RngStream(seed + i, ("model",))) for i in range(k)]


# ---------------------------------------------------------------- derive_rng

def test_derive_rng_streams():
    a = derive_rng(7, 3, 1, "local").raw(1000)
    assert np.array_equal(a, derive_rng(7, 3, 1, "local").raw(1000))
    assert np.all(a != derive_rng(7, 3, 2, "local").raw(1000))
    assert np.all(a != derive_rng(7, 4, 1, "local").raw(1000))
    assert np.all(a != derive_rng(7, 3, 1, "eval").raw(1000))
    assert np.all(a != derive_rng(7, 3, SERVER_ID, "local").raw(1000))


# ---------------------------------------------------------------- pretraining

def test_single_class_client_predicts_its_class(small_dataset):
    c = small_dataset.seen_classes[0]
    x = small_dataset.features[small_dataset.labels == c]
    head = pretrain_local_classifier(x, np.full(len(x), 3), 20, 50, 1e-3, RngStream(0))
    assert np.all(head.predict(x) == 3)


def test_separable_two_class_client():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 50)
    x = rng.normal(scale=0.5, size=(100, 4))
    x[:, 0] += np.where(y == 0, -2.0, 2.0)
    head = pretrain_local_classifier(x, y, 2, 50, 1e-3, RngStream(1))
    assert np.mean(head.predict(x.astype(np.float32)) == y) >= 0.95


def test_classifier_is_frozen_through_training(small_dataset):
    config = tiny_config(rounds=3)
    partitions = make_partitions(small_dataset, config)
    result = run_federation(small_dataset, partitions, config)
    before = [c.cls_head for c in result.clients]
    assert all(not a.flags.writeable for h in before for a in h.arrays())
    state, _ = local_train(result.clients[0], config, RngStream(3))
    assert state.cls_head.weights.tobytes() == before[0].weights.tobytes()


# ---------------------------------------------------------------- local training

def float64_client(seed, n=8, d=5, m=3, hidden=6, n_classes=4):
    rng = np.random.default_rng(seed)
    model = gan_init(d, m, m, m, hidden, RngStream(seed, ("replay",)), dtype=np.float64)
    features = np.abs(rng.normal(size=(n, d)))
    labels = rng.integers(0, n_classes, size=n)
    attrs = rng.uniform(size=(n, m))
    head = LinearParams(rng.normal(size=(n_classes, d)), rng.normal(size=n_classes))
    part = ClientPartition(0, tuple(range(n_classes)), np.arange(n))
    cfg = desk_config(
        batch_size=n, n_critic=1, local_epochs=1, beta=0.7, learning_rate=1e-2, gp_lambda=10.0, ska=False
    )
    return ClientState(
        part, features, labels, attrs, None, model, head,
        adam_init(model.generator, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
        adam_init(model.discriminator, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2),
    ), cfg


def torch_one_step(state, cfg, rng):
    """Independent replay of one critic and one generator update with autograd."""
    torch = pytest.importorskip("torch")
    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64))  # noqa: E731

    def params(mlp):
        return [t(a).requires_grad_(True) for a in mlp.arrays()]

    def mlp(ps, x, out_relu):
        h = torch.nn.functional.leaky_relu(x @ ps[0].T + ps[1], 0.2)
        o = h @ ps[2].T + ps[3]
        return torch.relu(o) if out_relu else o

    g, dd = params(state.model.generator), params(state.model.discriminator)
    opt_g = torch.optim.Adam(g, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=1e-8)
    opt_d = torch.optim.Adam(dd, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=1e-8)
    n = state.features.shape[0]
    idx = rng.permutation(n)
    x = t(state.features[idx])
    a = t(state.attributes[idx])
    y = torch.tensor(state.labels[idx])

    z = t(rng.normal((n, state.model.noise_dim)))
    fake = mlp(g, torch.cat([z, a], 1), True).detach()
    eps = t(rng.uniform((n, 1)))
    x_hat = (eps * x + (1 - eps) * fake).requires_grad_(True)
    d_hat = mlp(dd, torch.cat([x_hat, a], 1), False)
    (grad_x,) = torch.autograd.grad(d_hat.sum(), x_hat, create_graph=True)
    gp = ((grad_x.norm(dim=1) - 1) ** 2).mean()
    loss_d = mlp(dd, torch.cat([fake, a], 1), False).mean() - mlp(dd, torch.cat([x, a], 1), False).mean() + cfg.gp_lambda * gp
    opt_d.zero_grad()
    loss_d.backward()
    opt_d.step()

    z = t(rng.normal((n, state.model.noise_dim)))
    fake = mlp(g, torch.cat([z, a], 1), True)
    logits = fake @ t(state.cls_head.weights).T + t(state.cls_head.bias)
    loss_g = -mlp(dd, torch.cat([fake, a], 1), False).mean() + cfg.beta * torch.nn.functional.cross_entropy(logits, y)
    opt_g.zero_grad()
    loss_g.backward()
    opt_g.step()
    return [p.detach().numpy() for p in g], [p.detach().numpy() for p in dd]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_one_step_matches_independent_autograd_replay(seed):
    # atol: Adam maps a gradient of rounding-noise size (~1e-19) to a step of ~lr * 1e-11
    state, cfg = float64_client(seed)
    new, history = local_train(state, cfg, RngStream(seed, ("step",)))
    g_ref, d_ref = torch_one_step(state, cfg, RngStream(seed, ("step",)))
    for ours, ref in zip(new.model.generator.arrays(), g_ref):
        assert np.allclose(ours, ref, rtol=1e-9, atol=1e-9)
    for ours, ref in zip(new.model.discriminator.arrays(), d_ref):
        assert np.allclose(ours, ref, rtol=1e-9, atol=1e-9)
    assert len(history) == 1 and np.isfinite(history[0].critic)


def test_client_smaller_than_batch_resamples(tiny_dataset):
    config = tiny_config(batch_size=64, rounds=1)
    result = run_federation(tiny_dataset, make_partitions(tiny_dataset, config), config)
    assert np.isfinite(result.metrics[0].mean_critic_loss)


def test_numeric_failure_carries_round_and_client():
    state, cfg = float64_client(4)
    bad = LinearParams(np.full_like(state.cls_head.weights, np.nan), state.cls_head.bias)
    with pytest.raises(NumericFailure) as exc:
        local_train(replace(state, cls_head=bad), cfg, RngStream(0), round=7)
    assert exc.value.round == 7 and exc.value.client == 0
    assert "round=7" in str(exc.value) and "client=0" in str(exc.value)


def test_local_train_rejects_condition_mismatch():
    state, cfg = float64_client(5)
    with pytest.raises(InvalidArgument):
        local_train(replace(state, attributes=state.attributes[:, :2]), cfg, RngStream(0))


# ---------------------------------------------------------------- selection

def test_full_fraction_selects_everyone():
    for t in range(1, 20):
        assert select_clients(6, 1.0, t, 3) == list(range(6))


def test_half_fraction_size():
    assert all(len(select_clients(4, 0.5, t, 0)) == 2 for t in range(50))
    assert len(select_clients(10, 0.01, 1, 0)) == 1


def test_selection_is_uniform():
    counts = np.zeros(4)
    for t in range(10_000):
        counts[select_clients(4, 0.5, t, 11)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


# ---------------------------------------------------------------- aggregation

def test_single_model_aggregate_is_identity():
    (m,) = random_models(1)
    assert aggregate([m], "holistic").equals(m)
    assert aggregate({0: m}, "generator_only").equals(m.generator)


def test_opposite_models_average_to_zero():
    (m,) = random_models(1)
    neg = GanModel(
        m.generator.with_arrays([-a for a in m.generator.arrays()]),
        m.discriminator.with_arrays([-a for a in m.discriminator.arrays()]),
        m.noise_dim,
    )
    agg = aggregate([m, neg], "holistic")
    assert all(not a.any() for a in agg.generator.arrays() + agg.discriminator.arrays())


def test_four_model_mean_within_one_ulp():
    models = random_models(4, seed=10)
    agg = aggregate(models, "holistic")
    for part in ("generator", "discriminator"):
        for k, got in enumerate(getattr(agg, part).arrays()):
            stack = [getattr(m, part).arrays()[k] for m in models]
            oracle = np.vectorize(lambda *v: sum(float(x) for x in v) / 4)(*stack).astype(np.float32)
            assert np.all(np.abs(got - oracle) <= np.spacing(np.abs(oracle)))


def test_aggregate_mapping_uses_client_order():
    models = random_models(3, seed=20)
    assert aggregate({2: models[2], 0: models[0], 1: models[1]}, "holistic").equals(aggregate(models, "holistic"))


def test_aggregate_rejects_mismatch():
    a = random_models(1)[0]
    b = random_models(1, dims=(6, 4, 4, 4, 9))[0]
    with pytest.raises(InvalidArgument):
        aggregate([a, b], "holistic")
    with pytest.raises(InvalidArgument):
        aggregate([a], "weighted")


def test_generator_only_broadcast_keeps_critics():
    models = random_models(3, seed=30)
    snapshot = [m.discriminator.copy() for m in models]
    out = broadcast(aggregate(models, "generator_only"), models, "generator_only")
    for m, d in zip(out, snapshot):
        assert m.discriminator.equals(d)
    assert all(m.generator.equals(out[0].generator) for m in out)


def test_holistic_broadcast_and_idempotence():
    models = random_models(3, seed=40)
    payload = aggregate(models, "holistic")
    once = broadcast(payload, models, "holistic")
    assert all(m.equals(payload) for m in once)
    twice = broadcast(payload, once, "holistic")
    assert all(a.equals(b) for a, b in zip(once, twice))
    g_payload = aggregate(models, "generator_only")
    g_once = broadcast(g_payload, models, "generator_only")
    g_twice = broadcast(g_payload, g_once, "generator_only")
    assert all(a.equals(b) for a, b in zip(g_once, g_twice))


def test_communication_accounting():
    (m,) = random_models(1)
    assert payload_size(m, "generator_only") == m.generator.n_params
    assert payload_size(m, "holistic") == m.generator.n_params + m.discriminator.n_params
    assert transmitted_params(m, "generator_only", 2, 4) == 6 * m.generator.n_params


# ---------------------------------------------------------------- privacy boundary

def test_server_module_imports_no_data_code():
    tree = ast.parse(Path(server.__file__).read_text(encoding="utf-8"))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add(node.module or "")
            imported.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            imported.update(a.name for a in node.names)
    assert not {"data", "Dataset", "ClientPartition", "ClientState", "client", "io"} & imported
    for fn in (server.aggregate, server.broadcast, server.select_clients, server.payload_size):
        for p in inspect.signature(fn).parameters.values():
            assert "Dataset" not in str(p.annotation) and "ClientState" not in str(p.annotation)


def reachable(root, limit=100_000):
    seen, stack = set(), [root]
    while stack and len(seen) < limit:
        obj = stack.pop()
        if id(obj) in seen or isinstance(obj, types.ModuleType) and obj is not root:
            continue
        seen.add(id(obj))
        yield obj
        if isinstance(obj, types.ModuleType):
            stack.extend(vars(obj).values())
        elif isinstance(obj, types.FunctionType):
            stack.extend(c.cell_contents for c in obj.__closure__ or () if c.cell_contents is not None)
            stack.extend(obj.__defaults__ or ())
        elif isinstance(obj, dict):
            stack.extend(obj.values())
        elif isinstance(obj, (list, tuple, set, frozenset)):
            stack.extend(obj)
        elif hasattr(obj, "__dict__") and not isinstance(obj, type):
            stack.extend(vars(obj).values())


def test_server_holds_no_client_features(small_dataset):
    config = tiny_config()
    result = run_federation(small_dataset, make_partitions(small_dataset, config), config)
    private = {id(c.features) for c in result.clients} | {id(small_dataset.features)}
    gc.collect()
    assert not any(id(o) in private for o in reachable(server))


# ---------------------------------------------------------------- orchestration

def test_zero_rounds_returns_initial_model(small_dataset):
    config = tiny_config(rounds=0)
    result = run_federation(small_dataset, make_partitions(small_dataset, config), config)
    assert result.metrics == []
    assert result.global_generator.equals(initial_model(small_dataset, config, None).generator)


def test_metrics_one_per_round(small_dataset):
    config = tiny_config(rounds=4, client_fraction=0.5)
    result = run_federation(small_dataset, make_partitions(small_dataset, config), config, eval_every=2)
    assert [m.round for m in result.metrics] == [1, 2, 3, 4]
    assert all(len(m.selected_clients) == 2 for m in result.metrics)
    assert [m.unseen_top1 is not None for m in result.metrics] == [False, True, False, True]
    for m in result.metrics:
        assert np.isfinite([m.mean_critic_loss, m.mean_generator_loss, m.mean_cls_loss]).all()


def test_single_client_holistic_equals_centralized(small_dataset):
    config = tiny_config(num_clients=1, aggregation_mode="holistic", rounds=3)
    fed = run_federation(small_dataset, make_partitions(small_dataset, config), config)
    central = train_centralized(small_dataset, config)
    assert fed.global_generator.equals(central.generator)
    assert fed.global_discriminator.equals(central.discriminator)


def test_result_independent_of_worker_count(small_dataset):
    config = tiny_config(rounds=2, client_fraction=0.75)
    parts = make_partitions(small_dataset, config)
    a = run_federation(small_dataset, parts, config, workers=1)
    b = run_federation(small_dataset, parts, config, workers=3)
    assert a.global_generator.equals(b.global_generator)
    assert [m.record() for m in a.metrics] == [m.record() for m in b.metrics]
    assert all(x.model.equals(y.model) for x, y in zip(a.clients, b.clients))


def test_partitions_must_cover_seen_classes(small_dataset):
    config = tiny_config()
    parts = make_partitions(small_dataset, config)
    with pytest.raises(InvalidArgument):
        run_federation(small_dataset, parts[:-1], config.replace(num_clients=3))


def test_clients_only_hold_their_rows(small_dataset):
    config = tiny_config(rounds=1)
    parts = make_partitions(small_dataset, config)
    result = run_federation(small_dataset, parts, config)
    for p, c in zip(parts, result.clients):
        assert c.features.tobytes() == small_dataset.features[p.row_indices].tobytes()
