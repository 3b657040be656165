"""Encoder-side pipeline and model-directory handling."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import bitstream as bs
from . import hsvlc
from .autoencoder import AutoencoderModel, encode_image
from .checkpoint import combined_hash
from .data import validate_image
from .diffusion import EpsilonModel
from .guided_decoder import DecoderModels
from .hsvlc import CodecModel
from .weight_map import WeightMap

AE_FILE = "ae.ckpt"
CODEC_FILE = "codec.ckpt"
CODEC_SINGLE_FILE = "codec_single.ckpt"
DIFFUSION_FILE = "diffusion.ckpt"


def load_encoder_models(models_dir, codec_file: str = CODEC_FILE):
    d = Path(models_dir)
    return AutoencoderModel.load(d / AE_FILE), CodecModel.load(d / codec_file)


def load_decoder_models(models_dir, codec_file: str = CODEC_FILE) -> DecoderModels:
    d = Path(models_dir)
    ae, codec = load_encoder_models(models_dir, codec_file)
    return DecoderModels(ae, codec, EpsilonModel.load(d / DIFFUSION_FILE))


def encode_container(image: np.ndarray, caption: str, M: WeightMap,
                     ae: AutoencoderModel, codec: CodecModel,
                     include_latents: bool = True) -> bs.RsicContainer:
    """Compress one image into a container under an importance map."""
    image = validate_image(image)
    dims = image.shape[:2]
    if tuple(M.image_dims) != tuple(dims):
        raise ValueError(f"weight map is for {M.image_dims}, image is {dims}")
    streams = [b""] * bs.NUM_STREAMS
    if include_latents:
        z0 = encode_image(ae, image)
        bits = hsvlc.compress(codec, z0, M)
        for i, s in enumerate(bits.streams):
            streams[i] = s
    return bs.RsicContainer(tuple(dims), M.levels, combined_hash(ae.hash8, codec.hash8),
                            caption, M.pack(), tuple(streams))
