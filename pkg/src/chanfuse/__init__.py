"""Microphone channel selection and channel weighting for multichannel log-Mel features."""

from chanfuse.featkit import AudioBuffer, FeatureMatrix, MelConfig, cmn, cvn, log_mel, normalize, stft_power
from chanfuse.gmm import EmConfig, GmmModel, frame_log_likelihood, gmm_train, posteriors, utterance_score
from chanfuse.autoencoder import AutoencoderModel, TrainConfig, ae_forward, ae_train, reconstruction_error, windowize
from chanfuse.chansel import MultichannelUtterance, SelectionResult, select_ae, select_ml, select_oracle
from chanfuse.chanweight import (
    FrameAccumulators,
    JacobianConfig,
    WeightedStats,
    WeightVector,
    apply_weights,
    estimate_weights_jacobian,
    estimate_weights_ml,
    frame_accumulators,
    jacobian_gradient,
    jacobian_objective,
    softmax_constrain,
    solve_frame_weight,
    weighted_stats,
)
from chanfuse.optim import LbfgsConfig, finite_diff_grad, lbfgs_minimize

__version__ = "0.1.0"
