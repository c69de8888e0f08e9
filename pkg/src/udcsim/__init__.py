"""Learned modular degradation generator, closed-form degradation oracle and a lightweight restorer."""
from .dwformer import DWFormer, RestorerConfig, freeze_bn, restore
from .generator import GeneratorConfig, MPGNet, generate, init_generator
from .imaging import Image, load_image, psnr, save_image, ssim
from .rng import RngStream
from .sgm import SgmConfig, sgm_degrade

__version__ = "0.1.0"
