import json

import numpy as np
import pytest

from peeler import checkpoint as ckpt
from peeler.config import (
    PRESETS,
    ConfigError,
    TrainConfig,
    build_dataset,
    build_split,
    dump_config,
    from_preset,
    load_config,
    parse_config_text,
)
from peeler.optim import train


class TestConfig:
    def test_paper_fewshot_preset(self):
        c = from_preset("paper-fewshot")
        assert (c.way, c.shot, c.open_way, c.lam) == (5, 1, 5, 0.5)
        assert c.milestones == (10000, 20000) and c.total_episodes == 30000
        assert c.base_lr == 1e-3 and c.lr_factor == 0.1 and c.eval_episodes == 600

    def test_paper_largescale_preset(self):
        c = from_preset("paper-largescale")
        assert c.mode == "largescale" and c.total_episodes == 10000 and c.milestones == (6000, 8000)
        assert c.open_way == 2

    def test_every_preset_validates(self):
        for name in PRESETS:
            from_preset(name).validate()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="paper-fewshot"):
            from_preset("nope")

    def test_unknown_key_in_file(self):
        with pytest.raises(ConfigError, match="line 2: unknown config key 'lamda'"):
            parse_config_text("way = 5\nlamda = 0.5\n")

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="bogus"):
            load_config(None, None, bogus=1)

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="way"):
            load_config(None, None, way="five")

    def test_round_trip(self, tmp_path):
        c = from_preset("paper-largescale", lam=0.25, base_seed=9)
        path = tmp_path / "c.txt"
        path.write_text(dump_config(c))
        back = load_config(path)
        assert back == c and back.content_hash() == c.content_hash()

    def test_file_then_override(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("# comment\npreset = paper-fewshot\nlam = 0.1  # inline\nhidden = [32]\n")
        c = load_config(path, lam=0.3)
        assert c.total_episodes == 30000 and c.lam == 0.3 and c.hidden == (32,)

    def test_hash_tracks_content(self):
        a, b = from_preset("desk"), from_preset("desk", lam=0.4)
        assert a.content_hash() != b.content_hash()
        e = from_preset("desk", eval_episodes=10)
        assert e.training_hash() == a.training_hash() and e.content_hash() != a.content_hash()

    @pytest.mark.parametrize(
        "bad",
        [{"mode": "x"}, {"head": "cosine"}, {"lam": -1.0}, {"reduction": "max"}, {"way": 1}, {"milestones": (5, 3)}],
    )
    def test_invalid_values(self, bad):
        with pytest.raises(ConfigError):
            from_preset("desk", **bad)

    def test_replace_rejects_unknown(self):
        with pytest.raises(ConfigError):
            from_preset("desk").replace(nope=3)


def small_config(**kw):
    return from_preset("desk", **{"n_classes": 20, "samples_per_class": 30, "hidden": (8,), "embed_dim": 4,
                                   "total_episodes": 12, "milestones": (6,), **kw})


class TestCheckpoint:
    def test_array_round_trip(self):
        a = np.random.default_rng(0).normal(size=(3, 4)) * 10.0 ** np.arange(-150, 150, 25).reshape(3, 4)
        a[0, 0] = -0.0
        back = ckpt.decode_array(json.loads(json.dumps(ckpt.encode_array(a))))
        assert back.tobytes() == a.tobytes()

    def test_payload_size_checked(self):
        with pytest.raises(ValueError):
            ckpt.decode_array({"shape": [2, 2], "values": "1 2 3"})

    @pytest.mark.parametrize("head", ["euclidean", "mahalanobis"])
    @pytest.mark.parametrize("mode", ["fewshot", "largescale"])
    def test_state_round_trip(self, tmp_path, head, mode):
        cfg = small_config(head=head, mode=mode, split=(0.6, 0.0, 0.4), allow_empty_split=True)
        ds = build_dataset(cfg)
        sp = build_split(cfg, ds)
        st = train(ds, sp, cfg, until=7)
        path = tmp_path / "ck.json"
        ckpt.save_checkpoint(path, st, cfg)
        doc = ckpt.read_checkpoint(path)
        assert ckpt.config_from_document(doc) == cfg
        back = ckpt.load_state(doc, cfg, ds, sp)
        assert back.episode == 7 and back.adam.t == st.adam.t and back.running == st.running
        for k, p in st.parameters().items():
            assert back.parameters()[k].data.tobytes() == p.data.tobytes()
            assert back.adam.m[k].tobytes() == st.adam.m[k].tobytes()
            assert back.adam.v[k].tobytes() == st.adam.v[k].tobytes()
        ckpt.save_checkpoint(tmp_path / "again.json", back, cfg)
        assert (tmp_path / "again.json").read_bytes() == path.read_bytes()

    def test_resume_from_file_matches_uninterrupted(self, tmp_path):
        cfg = small_config()
        ds = build_dataset(cfg)
        sp = build_split(cfg, ds)
        ckpt.save_checkpoint(tmp_path / "half.json", train(ds, sp, cfg, until=5), cfg)
        resumed = train(ds, sp, cfg, state=ckpt.load_state(ckpt.read_checkpoint(tmp_path / "half.json"), cfg, ds, sp))
        ckpt.save_checkpoint(tmp_path / "a.json", resumed, cfg)
        ckpt.save_checkpoint(tmp_path / "b.json", train(ds, sp, cfg), cfg)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = small_config()
        ds = build_dataset(cfg)
        sp = build_split(cfg, ds)
        ckpt.save_checkpoint(tmp_path / "c.json", train(ds, sp, cfg, until=1), cfg)
        other = cfg.replace(embed_dim=5)
        with pytest.raises(ValueError, match="shape"):
            ckpt.load_state(ckpt.read_checkpoint(tmp_path / "c.json"), other, ds, sp)

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError, match="not a checkpoint"):
            ckpt.read_checkpoint(tmp_path / "x.json")


def test_config_is_a_dataclass_with_defaults():
    c = TrainConfig()
    assert c.lam == 0.5 and c.base_lr == 1e-3 and c.reduction == "mean"
