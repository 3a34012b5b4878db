import numpy as np
import pytest
import torch

from centroid_uda.checkpoint import Checkpoint, flatten_optimizer, load_arrays, restore_optimizer, save_arrays
from centroid_uda.config import ABLATIONS, ENV_PREFIX, TrainConfig, parse_kv, profile


def test_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lambda_contrast, cfg.lambda_cnr, cfg.rho, cfg.target_bs) == (1.0, 0.5, 0.9, 1)
    for bad in ({"mode": "x"}, {"tau": 0.0}, {"rho": 1.0}, {"source_bs": 0}, {"lr_main": -1.0}, {"partitions": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_reference_profile():
    cfg = profile("reference")
    assert (cfg.warmup_epochs, cfg.main_epochs, cfg.source_bs, cfg.lr_warmup, cfg.lr_main) == (200, 200, 32, 5e-4, 2.5e-4)
    with pytest.raises(KeyError):
        profile("nope")


def test_ablation_lattice_is_nested():
    order = ["FUDA", "FUDA+CCL", "FUDA+CCL+CNR", "FUDA+CCL+CNR+MPCCL"]
    on = [{k for k, v in ABLATIONS[n].items() if v and k.startswith("use_")} for n in order]
    assert all(a < b for a, b in zip(on, on[1:]))
    assert all(TrainConfig(**ABLATIONS[n]).variant == n for n in ABLATIONS)


def test_text_round_trip_and_hash(tmp_path):
    cfg = TrainConfig(tau=0.25, mode="fewshot", use_cnr=False)
    p = tmp_path / "c.txt"
    p.write_text(cfg.to_text())
    back = TrainConfig.from_file(p)
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.replace(out_dir="/elsewhere").hash() == cfg.hash()
    assert cfg.replace(seed=1).hash() != cfg.hash()


def test_parse_kv():
    assert parse_kv("a = 1\n# comment\n\nb=x # trailing\n") == {"a": "1", "b": "x"}
    with pytest.raises(ValueError):
        parse_kv("no equals sign")
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"nonsense": "1"})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"use_ccl": "maybe"})


def test_env_override():
    cfg = TrainConfig().with_env({ENV_PREFIX + "TAU": "0.3", ENV_PREFIX + "USE_CCL": "off", "OTHER": "1"})
    assert cfg.tau == 0.3 and cfg.use_ccl is False


def test_arrays_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(3.5), "c": np.array([True, False])}
    save_arrays(tmp_path, arrays, {"k": "v"})
    back, meta = load_arrays(tmp_path)
    assert meta == {"k": "v"}
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])
    (tmp_path / "manifest.txt").write_text("format = other\n")
    with pytest.raises(ValueError):
        load_arrays(tmp_path)


def test_optimizer_round_trip():
    net = torch.nn.Linear(3, 2)
    opt = torch.optim.SGD(net.parameters(), lr=0.1, momentum=0.9)
    net(torch.randn(4, 3)).sum().backward()
    opt.step()
    arrays, blob = flatten_optimizer("opt", opt)
    opt2 = torch.optim.SGD(net.parameters(), lr=0.5, momentum=0.9)
    restore_optimizer(opt2, "opt", arrays, blob)
    s1, s2 = opt.state_dict(), opt2.state_dict()
    assert s1["param_groups"] == s2["param_groups"]
    for i in s1["state"]:
        assert torch.equal(s1["state"][i]["momentum_buffer"], s2["state"][i]["momentum_buffer"])


def test_checkpoint_bit_exact(tmp_path):
    g = torch.Generator().manual_seed(0)
    c = Checkpoint(
        step=7, config_hash="abc",
        seg_state={"w": torch.randn(3, 3, generator=g), "n": torch.tensor(5)},
        style_state={"pretrained": torch.tensor(True)},
        bank_values=torch.randn(4, 2, generator=g), bank_initialized=torch.tensor([True, False, True, True]),
        epsilon=torch.randn(16, generator=g), rng_state=torch.get_rng_state(), extra={"variant": "FUDA"},
    )
    c.save(tmp_path)
    d = Checkpoint.load(tmp_path)
    assert d.step == 7 and d.config_hash == "abc" and d.extra == {"variant": "FUDA"}
    for a, b in [(c.seg_state["w"], d.seg_state["w"]), (c.bank_values, d.bank_values), (c.epsilon, d.epsilon),
                 (c.rng_state, d.rng_state), (c.bank_initialized, d.bank_initialized)]:
        assert a.dtype == b.dtype and torch.equal(a, b)
    assert d.style_state["pretrained"].item() is True
