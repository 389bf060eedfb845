import numpy as np
import pytest
import torch

from boxprompt.backbone import MEDSAM_VITB_SPEC, TOY_SPEC
from boxprompt.errors import IOFailure, ShapeMismatch, ShapeSpecMismatch
from boxprompt.promptnet import (
    PromptModule,
    PromptModuleConfig,
    init_prompt_module,
    load_prompt_module,
    medsam_prompt_config,
    parameter_count,
    parameter_set,
    save_prompt_module,
)

TOY_CFG = PromptModuleConfig(
    in_channels=8, reduced_channels=4, dense_out_channels=8,
    sparse_tokens=2, sparse_dim=8, grid=(16, 16), init_seed=0,
)


def test_forward_shapes():
    module = PromptModule(TOY_CFG)
    out = module(torch.randn(8, 16, 16))
    assert tuple(out.dense.shape) == (8, 16, 16)
    assert tuple(out.sparse.shape) == (2, 8)
    assert torch.isfinite(out.dense).all() and torch.isfinite(out.sparse).all()


def test_same_seed_bitwise_identical():
    a = parameter_set(PromptModule(TOY_CFG))
    b = parameter_set(PromptModule(TOY_CFG))
    assert a.keys() == b.keys()
    for k in a:
        assert torch.equal(a[k], b[k])


def test_different_seed_differs():
    import dataclasses

    other = dataclasses.replace(TOY_CFG, init_seed=1)
    a = parameter_set(PromptModule(TOY_CFG))
    b = parameter_set(PromptModule(other))
    assert any(not torch.equal(a[k], b[k]) for k in a)


def test_medsam_sized_parameter_count():
    cfg = medsam_prompt_config()
    module = PromptModule(cfg)
    n = parameter_count(module)
    assert 1_000_000 <= n <= 5_000_000
    # target is ~2.4M trainable parameters
    assert abs(n - 2_400_000) < 150_000


def test_zero_input_zero_dense():
    module = PromptModule(TOY_CFG)  # biases init to zero
    out = module(torch.zeros(8, 16, 16))
    assert torch.equal(out.dense, torch.zeros_like(out.dense))
    assert torch.equal(out.sparse, torch.zeros_like(out.sparse))


def test_forward_is_pure():
    module = PromptModule(TOY_CFG)
    x = torch.randn(8, 16, 16)
    a = module(x)
    b = module(x)
    assert torch.equal(a.dense, b.dense) and torch.equal(a.sparse, b.sparse)


def test_forward_shape_mismatch():
    module = PromptModule(TOY_CFG)
    with pytest.raises(ShapeMismatch):
        module(torch.randn(8, 8, 8))


def test_parameter_count_closed_form():
    cfg = TOY_CFG
    module = PromptModule(cfg)
    r, i, d = cfg.reduced_channels, cfg.in_channels, cfg.dense_out_channels
    sc = cfg.effective_sparse_channels
    expected = (
        (i * r + r)                       # 1x1 reduce
        + (9 * r * d + d)                 # 3x3 dense conv
        + (r * sc + sc)                   # 1x1 sparse conv
        + (sc * cfg.sparse_tokens * cfg.sparse_dim + cfg.sparse_tokens * cfg.sparse_dim)
    )
    assert parameter_count(module) == expected
    assert expected == sum(p.numel() for p in parameter_set(module).values())


def test_count_monotone_in_reduced_channels():
    import dataclasses

    wider = dataclasses.replace(TOY_CFG, reduced_channels=8)
    assert parameter_count(PromptModule(wider)) > parameter_count(PromptModule(TOY_CFG))


def test_count_stable_across_forwards():
    module = PromptModule(TOY_CFG)
    n0 = parameter_count(module)
    module(torch.randn(8, 16, 16))
    assert parameter_count(module) == n0


def test_init_validated_against_spec():
    cfg = PromptModuleConfig(
        in_channels=TOY_SPEC.embed_channels,
        reduced_channels=16,
        dense_out_channels=TOY_SPEC.dense_prompt_channels,
        sparse_tokens=2,
        sparse_dim=TOY_SPEC.token_dim,
        grid=TOY_SPEC.embed_grid,
    )
    init_prompt_module(cfg, TOY_SPEC)  # valid
    with pytest.raises(ShapeSpecMismatch):
        init_prompt_module(cfg, MEDSAM_VITB_SPEC)


def test_invalid_config_rejected():
    with pytest.raises(ShapeSpecMismatch):
        PromptModuleConfig(
            in_channels=0, reduced_channels=4, dense_out_channels=8,
            sparse_tokens=2, sparse_dim=8, grid=(16, 16),
        )


def test_gradient_matches_finite_differences():
    module = PromptModule(TOY_CFG).double()
    x = torch.randn(8, 16, 16, dtype=torch.float64)

    def scalar():
        out = module(x)
        return out.dense.sum() + out.sparse.sum()

    scalar().backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    for name, p in module.named_parameters():
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        for _ in range(4):
            i = int(rng.integers(0, flat.numel()))
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(scalar())
                flat[i] = orig - h
                down = float(scalar())
                flat[i] = orig
            num = (up - down) / (2 * h)
            ana = float(grad[i])
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-2), name


def test_checkpoint_roundtrip(tmp_path):
    module = PromptModule(TOY_CFG)
    with torch.no_grad():  # make parameters non-trivial
        for p in module.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    path = tmp_path / "module.ckpt"
    save_prompt_module(path, module, extra_meta={"note": "roundtrip"})
    loaded, extra = load_prompt_module(path)
    assert extra == {"note": "roundtrip"}
    assert loaded.cfg == module.cfg
    for (ka, pa), (kb, pb) in zip(
        module.named_parameters(), loaded.named_parameters()
    ):
        assert ka == kb
        assert torch.equal(pa.detach().float(), pb.detach())


def test_checkpoint_bad_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(IOFailure):
        load_prompt_module(path)
