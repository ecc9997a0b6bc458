"""Adversarial PGD attacks on image deblurring operators."""

from .attack import AttackConfig, AttackResult, pgd_attack, transfer_eval
from .blur import BlurModel, adjoint_convolve, convolve_circular, make_blurry
from .grad import Targeted, Untargeted, loss_and_grad, vjp
from .imaging import Kernel, MetricsRecord, evaluate, load_kernel, load_raw, ncc, psnr, save_kernel, save_raw
from .reconstructors import Reconstructor, UnrolledConfig, WienerConfig, reconstruct

__version__ = "0.1.0"
