from collections import OrderedDict

import numpy as np
import pytest
import torch

from fv2ic.config import ExperimentConfig, from_dict
from fv2ic.errors import ProtocolError
from fv2ic.fedsim import (
    CommLedger,
    client_local_train,
    distill,
    ensemble_predict,
    fedavg_aggregate,
    round_payload_bytes,
    run_experiment,
    run_round,
    setup_federation,
    weighted_average,
)
from fv2ic.losses import seg_loss
from fv2ic.models import predict_probs
from fv2ic.params import clone_state
from fv2ic.synthdata import make_batch

from .helpers import gen


def small_cfg(preset=None, **over):
    base = {
        "dataset": {"image_size": 16, "num_clients": 2, "samples_per_client": 20},
        "model": {"unet_depth": 2, "vae_depth": 2, "latent_dim": 4},
        "federation": {"rounds": 3, "batch_labeled": 2, "distill_batch": 4},
    }
    if preset is None:
        base["federation"].update(batch_unlabeled=4, iter_max_distill=2)
        base["loss"] = {"lambda_max": 0.5}
    else:
        base["preset"] = preset
    cfg = from_dict(base)
    return cfg.replace(**over) if over else cfg


def states_equal(a, b):
    return list(a) == list(b) and all(torch.equal(a[k], b[k]) for k in a)


def test_no_op_training_returns_global():
    cfg = small_cfg(**{"federation.iter_max_vae": 0, "federation.iter_max_seg": 0})
    _, server, clients = setup_federation(cfg)
    g = clone_state(server.model.state_dict())
    new, summary = client_local_train(clients[0], g, 0, cfg)
    assert states_equal(new, g) and summary == {}


def test_zero_learning_rate_leaves_params():
    cfg = small_cfg(
        **{"federation.iter_max_vae": 1, "federation.iter_max_seg": 1, "federation.lr_unet": 0.0, "federation.lr_vae": 0.0}
    )
    _, server, clients = setup_federation(cfg)
    g = clone_state(server.model.state_dict())
    new, summary = client_local_train(clients[1], g, 2, cfg)
    assert states_equal(new, g)
    assert set(summary) == {"vae_kl", "vae_mse", "dice", "ce", "cons", "seg_total"}


def test_overfit_single_batch_loss_decreases():
    cfg = small_cfg(**{"model.seg_z": "mean", "loss.lambda_max": 0.0})
    _, server, clients = setup_federation(cfg)
    model = server.model
    batch = make_batch(clients[0].data, 2, 0, np.random.default_rng(0))
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    losses = []
    for _ in range(50):
        out = seg_loss(model, batch, 0, cfg)
        opt.zero_grad()
        out.total.backward()
        opt.step()
        losses.append(out.total.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_fedavg_scalar_examples():
    a, b = OrderedDict(w=torch.tensor(2.0)), OrderedDict(w=torch.tensor(4.0))
    assert weighted_average([a, b], [5, 5])["w"].item() == 3.0
    assert weighted_average([a, b], [1, 2])["w"].item() == pytest.approx(10 / 3, abs=1e-6)
    single = weighted_average([a], [7])
    assert torch.equal(single["w"], a["w"])


def test_fedavg_matches_flat_oracle():
    rng = np.random.default_rng(0)
    shapes = {"a": (3, 4), "b": (5,), "c": (2, 2, 2)}
    states, sizes = [], [7, 13, 2, 9]
    for _ in sizes:
        states.append(OrderedDict((k, torch.from_numpy(rng.standard_normal(s))) for k, s in shapes.items()))
    got = weighted_average(states, sizes)
    flat = np.stack([np.concatenate([s[k].numpy().ravel() for k in shapes]) for s in states])
    ref = (np.array(sizes, float)[:, None] * flat).sum(0) / sum(sizes)
    got_flat = np.concatenate([got[k].numpy().ravel() for k in shapes])
    assert np.max(np.abs(got_flat - ref)) <= 1e-12


def test_fedavg_identical_clients_conserved():
    s = OrderedDict(w=torch.randn(4, 4, dtype=torch.float64, generator=gen(1)))
    out = weighted_average([clone_state(s) for _ in range(3)], [1, 5, 9])
    assert torch.max(torch.abs(out["w"] - s["w"])) <= 1e-12


def test_fedavg_manifest_mismatch_and_empty():
    with pytest.raises(ProtocolError):
        weighted_average([OrderedDict(w=torch.zeros(2)), OrderedDict(w=torch.zeros(3))], [1, 1])
    with pytest.raises(ProtocolError):
        weighted_average([], [])


def test_fedavg_over_clients_uses_dataset_sizes():
    cfg = small_cfg()
    _, _, clients = setup_federation(cfg)
    with torch.no_grad():
        for c, v in zip(clients, (2.0, 4.0)):
            for p in c.model.parameters():
                p.fill_(v)
    # equal client sizes -> plain mean
    agg = fedavg_aggregate(clients)
    assert all(torch.all(t == 3.0) for k, t in agg.items())


def test_ensemble_properties():
    cfg = small_cfg()
    _, server, clients = setup_federation(cfg)
    z = torch.randn(3, 4, generator=gen(2))
    one = ensemble_predict(clients[:1], z)
    own = predict_probs(clients[0].model.unet(clients[0].model.vae.decode(z), z))
    torch.testing.assert_close(one, own)
    # clients start from the same weights: identical members
    torch.testing.assert_close(ensemble_predict(clients, z), own)
    with torch.no_grad():
        for p in clients[1].model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen(3)))
    mix = ensemble_predict(clients, z)
    assert torch.all(mix >= 0)
    assert torch.max(torch.abs(mix.sum(1) - 1)) <= 1e-6


def test_single_client_distillation_is_noop():
    cfg = small_cfg(**{"dataset.num_clients": 1, "federation.iter_max_distill": 4})
    _, server, clients = setup_federation(cfg)
    g = clone_state(server.model.state_dict())
    client_local_train(clients[0], g, 1, cfg)
    server.model.load_state_dict(fedavg_aggregate(clients))
    before = clone_state(server.model.state_dict())
    traj = distill(server, clients, cfg)
    assert traj == [0.0] * 4
    assert states_equal(before, server.model.state_dict())


def test_no_distillation_leaves_server():
    cfg = small_cfg(**{"federation.iter_max_distill": 0})
    _, server, clients = setup_federation(cfg)
    before = clone_state(server.model.state_dict())
    assert distill(server, clients, cfg) == []
    assert states_equal(before, server.model.state_dict())


def test_fixed_z_distillation_descends():
    cfg = small_cfg(**{"federation.iter_max_distill": 10, "federation.distill_fixed_z": True})
    _, server, clients = setup_federation(cfg)
    with torch.no_grad():
        for i, c in enumerate(clients):
            for p in c.model.parameters():
                p.add_(0.2 * torch.randn(p.shape, generator=gen(10 + i)))
    server.model.load_state_dict(fedavg_aggregate(clients))
    traj = distill(server, clients, cfg)
    assert traj[0] > 0
    assert traj[-1] <= traj[0]


def test_round_ledger_bytes_match_manifest():
    cfg = small_cfg(**{"federation.rounds": 2})
    ds, server, clients = setup_federation(cfg)
    ledger = CommLedger()
    row = run_round(server, clients, 0, cfg, ledger, ds.split_arrays("val"))
    n_values = sum(v.numel() for v in server.model.state_dict().values())
    assert round_payload_bytes(server.model, cfg) == 4 * n_values
    assert row["bytes_total"] == 2 * len(clients) * 4 * n_values == ledger.total
    assert row["round"] == 1 and 0 <= row["val_dice"] <= 1
    with pytest.raises(ProtocolError):
        run_round(server, clients, 2, cfg, ledger)


def test_baseline_transmits_unet_only():
    cfg = small_cfg("fedavg_baseline")
    _, server, _ = setup_federation(cfg)
    n_unet = sum(v.numel() for k, v in server.model.state_dict().items() if k.startswith("unet."))
    assert round_payload_bytes(server.model, cfg) == 4 * n_unet


def test_client_order_and_threads_do_not_matter():
    cfg = small_cfg()
    finals = []
    for order, workers in ((False, 1), (True, 1), (True, 2)):
        c = cfg.replace(**{"federation.workers": workers})
        _, server, clients = setup_federation(c)
        if order:
            clients = clients[::-1]
        for t in range(2):
            run_round(server, clients, t, c, CommLedger())
        finals.append(clone_state(server.model.state_dict()))
    assert states_equal(finals[0], finals[1]) and states_equal(finals[0], finals[2])


def test_run_experiment_writes_identical_reports(tmp_path):
    cfg = small_cfg()
    r1 = run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "report.csv").read_bytes()
    assert a == (tmp_path / "b" / "report.csv").read_bytes()
    assert len(r1.rows) == 3
    for name in ("ledger.csv", "summary.json", "config.json", "final.json", "final.bin", "best.json", "best.bin"):
        assert (tmp_path / "a" / name).exists()
    assert set(r1.test_metrics) == {"dice", "jaccard", "sensitivity", "accuracy"}


def test_baseline_reduction_matches_switches():
    cfg = small_cfg("fedavg_baseline")
    assert cfg.loss.lambda_max == 0 and cfg.federation.iter_max_distill == 0
    assert not cfg.model.latent_injection and not cfg.uses_vae


def test_paper_scale_preset():
    cfg = from_dict({"preset": "paper_scale"})
    f = cfg.federation
    assert (cfg.dataset.num_clients, f.rounds, f.batch_labeled, f.batch_unlabeled) == (10, 200, 4, 20)
    assert (f.lr_unet, f.lr_vae) == (2e-4, 1e-3)
