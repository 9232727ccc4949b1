import pytest

from pseudomri.config import desk_scale
from pseudomri.data import PhantomConfig
from pseudomri.networks import AutoencoderConfig, ConditionEncoderConfig, UNetConfig


def tiny_config(**train):
    """A run config small enough for second-scale tests (16x16 images, 6 slices)."""
    cfg = desk_scale()
    cfg.data.n = 5
    cfg.data.phantom = PhantomConfig(resolution=16, slices=6)
    cfg.autoencoder = AutoencoderConfig(base_channels=8, channel_multipliers=[1, 2], input_resolution=16, norm_groups=4)
    cfg.unet = UNetConfig(base_channels=8, channel_multipliers=[1, 2], attention_resolutions=[2], attention_heads=2,
                          context_dim=8, depth_dim=8, guidance_attn_dim=4, norm_groups=4)
    cfg.cond_encoder = ConditionEncoderConfig(base_channels=4, channel_multipliers=[1, 2], norm_groups=2)
    cfg.schedule.T = 100
    cfg.train.batch_size = 4
    cfg.train.eval_every = 5
    cfg.train.warmup_steps = 3
    cfg.train.checkpoint_every = 5
    cfg.infer.s = 6
    cfg.infer.steps = 5
    cfg.infer.s_list = [3, 6, 11]
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# acceptance criteria record their outcome here; the terminal summary prints one line each
ACCEPTANCE: dict = {}


def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:2d}  {name}  ({detail})")
