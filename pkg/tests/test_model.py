import numpy as np
import pytest
import torch

from gaprppg._validation import ValidationError
from gaprppg.model import (
    ModelConfig,
    build_model,
    count_parameters,
    load_checkpoint,
    parameter_checksum,
    routing_table,
    save_checkpoint,
    trainable_parameters,
)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(n_identities=10), seed=0)


def test_forward_shapes(model):
    out = model(torch.rand(2, 256, 64, 3))
    assert out.preds["bvp"].shape == (2, 256)
    for task in ("hr", "rr", "spo2"):
        assert out.preds[task].shape == (2,)
    assert out.id_logits.shape == (2, 11)
    assert out.z_p.shape == out.z_tasks["hr"].shape == out.z_shared.shape
    assert len(out.block_features) == model.config.n_blocks


def test_input_validation(model):
    with pytest.raises(ValidationError):
        model(torch.rand(2, 128, 64, 3))
    with pytest.raises(ValidationError):
        model(torch.rand(1, 256, 64, 3), mode="OTHER")
    with pytest.raises(ValidationError):
        ModelConfig(input_shape=(250, 64, 3))


def test_unadapted_ttpa_matches_mssdg(model):
    model.eval()
    x = torch.rand(3, 256, 64, 3)
    with torch.no_grad():
        a, b = model(x, "MSSDG").preds, model(x, "TTPA").preds
    for k in a:
        torch.testing.assert_close(a[k], b[k])


def test_routing(model):
    table = routing_table(model)
    assert set(table["TTPA"]) == set(table["MSSDG"])
    frozen = trainable_parameters(model, "TTPA", frozen_prefixes=("encoder.",))
    assert len(frozen) < len(list(model.parameters()))
    with pytest.raises(ValidationError):
        trainable_parameters(model, "x")


def test_build_deterministic():
    assert parameter_checksum(build_model(seed=3)) == parameter_checksum(build_model(seed=3))
    assert parameter_checksum(build_model(seed=3)) != parameter_checksum(build_model(seed=4))
    assert count_parameters(build_model()) > 0


def test_checkpoint_round_trip(tmp_path, model):
    save_checkpoint(tmp_path / "m.pt", model, seed=2, step=7, extra={"identities": ["a"]})
    back, meta = load_checkpoint(tmp_path / "m.pt")
    assert parameter_checksum(back) == parameter_checksum(model)
    assert meta["seed"] == 2 and meta["step"] == 7 and meta["extra"]["identities"] == ["a"]
    assert meta["config"]["n_identities"] == 10


def test_head_bias_initialization():
    m = build_model(ModelConfig(head_bias={"hr": 70.0, "rr": 12.0, "spo2": 97.0}))
    assert m.heads["hr"].bias.item() == 70.0


def _const_gate(value):
    return lambda z: torch.full_like(z, value)


def test_gate_forcing():
    m = build_model(seed=1).eval()
    x = torch.rand(2, 256, 64, 3)
    for t in m.gates:
        m.gates[t].forward = _const_gate(1.0)
    out = m(x)
    torch.testing.assert_close(out.z_tasks["hr"], out.z_shared)
    for t in m.gates:
        m.gates[t].forward = _const_gate(0.0)
    out = m(x)
    assert out.z_tasks["hr"].abs().max().item() == 0.0
    torch.testing.assert_close(out.preds["hr"], m.heads["hr"].bias.expand(2))


def test_gate_outputs_in_open_unit_interval(model):
    out = model.eval()(torch.rand(2, 256, 64, 3))
    for g in out.gates.values():
        assert g.min().item() > 0.0 and g.max().item() < 1.0


def test_modes_differ_only_after_gates():
    m = build_model(seed=2).eval()
    with torch.no_grad():
        m.fusion_scale.fill_(0.5)
    x = torch.rand(2, 256, 64, 3)
    before = parameter_checksum(m)
    with torch.no_grad():
        a, b = m(x, "MSSDG"), m(x, "TTPA")
    assert parameter_checksum(m) == before
    torch.testing.assert_close(a.z_shared, b.z_shared)
    for t in a.z_tasks:
        torch.testing.assert_close(a.z_tasks[t], b.z_tasks[t])
    assert not torch.allclose(a.preds["hr"], b.preds["hr"])


def test_excluded_parameters_get_no_update():
    m = build_model(seed=3).eval()
    params = trainable_parameters(m, "TTPA", frozen_prefixes=("heads.",))
    frozen = {n: p.detach().clone() for n, p in m.named_parameters() if n.startswith("heads.")}
    enc = m.encoder.blocks[0][0].weight.detach().clone()
    opt = torch.optim.SGD(params, lr=0.1)
    out = m(torch.rand(2, 256, 64, 3), "TTPA")
    loss = sum(out.preds[t].sum() for t in ("hr", "rr", "spo2")) + out.preds["bvp"].pow(2).sum()
    opt.zero_grad()
    loss.backward()
    opt.step()
    for n, p in m.named_parameters():
        if n in frozen:
            assert torch.equal(p, frozen[n]), n
    assert not torch.equal(m.encoder.blocks[0][0].weight, enc)
    assert len(routing_table(m)["MSSDG"]) == len(list(m.parameters()))


def test_composite_loss_finite_difference():
    """Analytic vs central-difference gradient of the full MSSDG objective on 32 random weights."""
    from gaprppg.losses import LossWeights, composite
    from gaprppg.protocols import pair_losses

    torch.manual_seed(0)
    m = build_model(ModelConfig(input_shape=(64, 16, 3), widths=(4, 8), n_identities=3, gate_hidden=8,
                                id_hidden=8, decoder_width=4), seed=0, dtype=torch.float64).eval()
    x = torch.rand(4, 64, 16, 3, dtype=torch.float64)
    ids = torch.tensor([0, 1, 0, 1])
    w = LossWeights()
    hr_t = torch.tensor([70.0, 80.0], dtype=torch.float64)

    def objective():
        out = m(x, "MSSDG")
        losses = pair_losses(out, 2, w, 8, ids, "MSSDG")
        losses["mt"] = (out.preds["hr"][:2] - hr_t).abs().mean()
        return composite(losses, w, 5, 10, "MSSDG")[0]

    params = [p for p in m.parameters()]
    gen = torch.Generator().manual_seed(0)
    picks = []
    for _ in range(32):
        p = params[int(torch.randint(len(params), (1,), generator=gen))]
        picks.append((p, int(torch.randint(p.numel(), (1,), generator=gen))))
    m.zero_grad()
    objective().backward()
    analytic = torch.tensor([p.grad.view(-1)[i].item() for p, i in picks])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p, i in picks:
            flat = p.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = objective().item()
            flat[i] = orig - h
            down = objective().item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric)
    rel = float((analytic - numeric).abs().max() / numeric.abs().max())
    assert rel < 1e-3
