"""ISAC network optimizer: joint user association and multi-BS transmit
beamforming under radar-SNR and CRB sensing constraints."""

from .scene import SystemConfig, Scenario, generate_scenario, dbm_to_watt, db_to_linear
from .channel import ChannelSet, draw_channels, steering_vector, steering_derivative, path_loss
from .metrics import (UAMatrix, BeamformingSolution, FimComponents, sinr, sinr_table,
                      sum_rate, radar_snr, detection_probability, theta_matrices,
                      fim, crb)
from .ua import RateTable, ua_objective, brute_force_ua, gale_shapley_ua, coalition_refine
from .llm import (PromptBundle, LlmBackendConfig, build_prompt, parse_response,
                  llm_optimize_ua, StubBackend, HttpChatBackend)
from .beamform import admm_solve, init_beamformer, solve_cq, solve_w, mm_bounds
from .driver import ao_solve, beampattern, sweep, AoResult

__version__ = "0.1.0"
