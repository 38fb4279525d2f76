import pytest
import torch

from tokenseg.backbone import ConvDecoder, ConvEncoder, EncoderConfig, group_count
from tokenseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

SMALL = dict(input_size=16, stage_channels=(4, 8, 16), token_dim=8, decoder_channels=4)


class TestEncoderConfig:
    def test_defaults(self):
        cfg = EncoderConfig()
        assert cfg.n_stages == 5
        assert cfg.deep_grid == 2
        assert cfg.shallow_channels == 32
        assert cfg.deep_channels == 256

    def test_rejects_indivisible_input(self):
        with pytest.raises(ValueError, match="multiple of 32"):
            EncoderConfig(input_size=60)

    def test_rejects_degenerate_deep_grid(self):
        # 32 with five stages would collapse the deepest map to 1x1
        with pytest.raises(ValueError, match="at least 64"):
            EncoderConfig(input_size=32)

    def test_rejects_too_few_stages(self):
        with pytest.raises(ValueError, match="3 encoder stages"):
            EncoderConfig(stage_channels=(8, 16))

    def test_rejects_bad_channels(self):
        with pytest.raises(ValueError):
            EncoderConfig(stage_channels=(8, 0, 16))
        with pytest.raises(ValueError):
            EncoderConfig(token_dim=0)

    def test_list_channels_coerced(self):
        cfg = EncoderConfig(input_size=16, stage_channels=[4, 8, 16])
        assert cfg.stage_channels == (4, 8, 16)


class TestConvEncoder:
    def test_stage_shapes_default(self):
        torch.manual_seed(0)
        enc = ConvEncoder(EncoderConfig())
        feats = enc(torch.randn(2, 1, 64, 64))
        shapes = [tuple(f.shape) for f in feats]
        assert shapes == [
            (2, 16, 32, 32),
            (2, 32, 16, 16),
            (2, 64, 8, 8),
            (2, 128, 4, 4),
            (2, 256, 2, 2),
        ]

    def test_rejects_odd_grid(self):
        enc = ConvEncoder(EncoderConfig(**SMALL))
        with pytest.raises(ValueError, match="square and divisible"):
            enc(torch.randn(1, 1, 15, 15))
        with pytest.raises(ValueError, match="square and divisible"):
            enc(torch.randn(1, 1, 16, 24))

    def test_rejects_wrong_channels(self):
        enc = ConvEncoder(EncoderConfig(**SMALL))
        with pytest.raises(ValueError, match="expected input"):
            enc(torch.randn(1, 3, 16, 16))


class TestConvDecoder:
    def test_output_is_stride_four(self):
        torch.manual_seed(0)
        cfg = EncoderConfig()
        enc, dec = ConvEncoder(cfg), ConvDecoder(cfg)
        feats = enc(torch.randn(2, 1, 64, 64))
        out = dec(torch.randn(2, cfg.token_dim, 2, 2), feats)
        assert tuple(out.shape) == (2, cfg.decoder_channels, 16, 16)

    def test_small_config(self):
        torch.manual_seed(0)
        cfg = EncoderConfig(**SMALL)
        enc, dec = ConvEncoder(cfg), ConvDecoder(cfg)
        feats = enc(torch.randn(1, 1, 16, 16))
        out = dec(torch.randn(1, cfg.token_dim, cfg.deep_grid, cfg.deep_grid), feats)
        assert tuple(out.shape) == (1, 4, 4, 4)

    def test_rejects_wrong_channel_count(self):
        cfg = EncoderConfig(**SMALL)
        enc, dec = ConvEncoder(cfg), ConvDecoder(cfg)
        feats = enc(torch.randn(1, 1, 16, 16))
        with pytest.raises(ValueError, match="input channels"):
            dec(torch.randn(1, 3, 2, 2), feats)

    def test_zero_input_zero_bias_gives_zero(self):
        torch.manual_seed(0)
        cfg = EncoderConfig(**SMALL)
        enc, dec = ConvEncoder(cfg), ConvDecoder(cfg)
        for module in (enc, dec):
            for name, p in module.named_parameters():
                if name.endswith(".bias"):
                    with torch.no_grad():
                        p.zero_()
        feats = enc(torch.zeros(1, 1, 16, 16))
        out = dec(torch.zeros(1, cfg.token_dim, cfg.deep_grid, cfg.deep_grid), feats)
        assert torch.all(out == 0.0)


def test_group_count():
    assert group_count(16) == 8
    assert group_count(4) == 4
    assert group_count(6) == 2
    assert group_count(7) == 1


class TestCheckpointRoundtrip:
    def _encoders(self):
        cfg = EncoderConfig(**SMALL)
        torch.manual_seed(0)
        a = ConvEncoder(cfg)
        torch.manual_seed(99)
        b = ConvEncoder(cfg)
        return a, b

    def test_loaded_params_identical(self, tmp_path):
        a, b = self._encoders()
        path = tmp_path / "enc.bin"
        save_checkpoint(a, path)
        load_checkpoint(b, path)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)
        x = torch.randn(1, 1, 16, 16)
        ya, yb = a(x)[-1], b(x)[-1]
        assert (ya - yb).abs().max().item() == 0.0

    def test_rejects_architecture_mismatch(self, tmp_path):
        a, _ = self._encoders()
        other = ConvEncoder(
            EncoderConfig(input_size=16, stage_channels=(4, 8, 8), token_dim=8)
        )
        path = tmp_path / "enc.bin"
        save_checkpoint(a, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(other, path)

    def test_rejects_truncated_and_trailing(self, tmp_path):
        a, b = self._encoders()
        path = tmp_path / "enc.bin"
        save_checkpoint(a, path)
        blob = path.read_bytes()
        short = tmp_path / "short.bin"
        short.write_bytes(blob[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(b, short)
        long = tmp_path / "long.bin"
        long.write_bytes(blob + b"\x00\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(b, long)

    def test_rejects_bad_magic(self, tmp_path):
        a, b = self._encoders()
        path = tmp_path / "enc.bin"
        save_checkpoint(a, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(b, path)
