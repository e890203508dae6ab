"""Graph-structured dynamics identified as linear operators on explicit feature
spaces, with quadratic control in that feature space."""
__version__ = "0.1.0"

from .graph import (Dataset, Graph, MaxRetriesExceeded, Trajectory, chain_graph, complete_graph,
                    generate_erdos_renyi, inclusive_neighborhood, load_dataset, ring_graph,
                    save_dataset, single_node_graph)
from .features import (ActionProjection, Decoder, FeatureMap, decode, decode_action,
                       encode_action, encode_graph, encode_node, fit_decoder, identity_map,
                       make_action_projection, polynomial_map, sample_rff_map)
from .mean_field import GibbsPotential, WeightVector, aggregate_history, edge_weights, gibbs_weights
from .embedding import (EmbeddingModel, FeatureData, FitConfig, encode_dataset, fit,
                        load_model, predict_one_step, rollout, save_model)
from .simulators import (GridConfig, LinearConfig, LinearGraphSystem, RopeConfig,
                         generate_dataset, grid_step, inject_noise, linear_graph_step, make_env,
                         rope_step)
from .control import (ControlProblem, ControlResult, control_metrics, linearize_rollout,
                      receding_horizon_control, solve_lqr)
