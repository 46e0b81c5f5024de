"""Shared fixtures: a small but fully trained world for the heavier tests.

Training the generator stack once per session keeps the expensive tests
honest (they exercise genuinely trained models) without repeating work.
"""

from types import SimpleNamespace

import pytest

from mindloop import dataset as D
from mindloop.diffusion import Denoiser, make_schedule, train_denoiser
from mindloop.encoders import (
    LatentAutoencoder,
    TextEncoder,
    VisualEncoder,
    train_autoencoder,
)


@pytest.fixture(scope="session")
def toy_world():
    """192-image dataset with trained autoencoder and denoiser."""
    cfg = D.SynthesisConfig(n_train=192, n_test=24, n_lvc=64, n_hvc=64)
    ds = D.synthesize(cfg, seed=7)
    imgs = [it.stimulus.pixels for it in ds.train]

    ae = LatentAutoencoder(seed=3)
    ae_trace = train_autoencoder(ae, imgs, epochs=6, lr=2e-3, seed=0)

    text_enc = TextEncoder(vocab_size=len(D.VOCABULARY), seed=1)
    vis_enc = VisualEncoder(seed=0)
    latents = [ae.to_latent(img).data for img in imgs]
    conds = [text_enc.encode(it.stimulus.caption_tokens) for it in ds.train]

    schedule = make_schedule()
    den = Denoiser(seed=5)
    den_trace = train_denoiser(den, schedule, latents, conds,
                               epochs=40, lr=2e-3, seed=0)
    polish = train_denoiser(den, schedule, latents, conds,
                            epochs=15, lr=5e-4, seed=1)
    return SimpleNamespace(
        config=cfg, dataset=ds, autoencoder=ae, ae_trace=ae_trace,
        text_encoder=text_enc, visual_encoder=vis_enc, latents=latents,
        conditions=conds, schedule=schedule, denoiser=den,
        denoiser_trace=den_trace, polish_trace=polish,
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance verdict lines collected during the session."""
    try:
        from acceptance_report import LINES
    except ImportError:
        return
    if not LINES:
        return
    terminalreporter.section("acceptance checks")
    for _, line in sorted(LINES, key=lambda pair: pair[0]):
        terminalreporter.write_line(line)
