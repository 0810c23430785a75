"""Monte Carlo laboratory for random-walk clouds and their vacant sets.

The package builds up in layers:

- :mod:`interlacements.rng` — counter-based splittable random streams;
- :mod:`interlacements.lattice` — boxes, site sets, neighborhood helpers;
- :mod:`interlacements.potential` — Green function, equilibrium measure,
  capacity for the lazy and plain nearest-neighbor walks;
- :mod:`interlacements.engine` — keyed walk stepping, window tracing,
  survival dynamic programs;
- :mod:`interlacements.cloud` — Poisson clouds of labeled trajectories:
  the infinite-walk model, finite-length clouds, start-profile reroots;
- :mod:`interlacements.truncated` — noise bands, sprinkled multipliers,
  homogeneous length-L models and the two interpolation families;
- :mod:`interlacements.torus` — vacant set of a long torus walk;
- :mod:`interlacements.percolation` — cluster labeling and percolation
  observables over any of the samplers;
- :mod:`interlacements.harness` — config-driven sweeps with deterministic
  threading, transition bracketing, plot-data emission;
- :mod:`interlacements.acceptance` — the fifteen-point self-check suite
  (also exposed as ``interlace selftest``).
"""

from .lattice import Box, Trajectory, WalkKernel, sup_norm
from .engine import (ResourceBudgetError, SurvivalData, WindowTracer,
                     segment_intensity, segment_site_rates, survival_profile)
from .potential import (CapacitySolveError, EquilibriumMeasure, GreenTable,
                        capacity, equilibrium_measure, escape_probability_mc,
                        green_table, green_value, hitting_probability,
                        kernel_for_convention)
from .cloud import (IntensityProfile, LabeledTrajectorySet, OccupancyField,
                    WindowSample, fast_forward_cloud,
                    interlacement_window_fields, mean_occupation_density,
                    occupation_field, pair_covariance, reroot_profile,
                    sample_interlacement_window, sample_J, sample_rho_model,
                    sample_segment_cloud, segment_cloud_vacancy)
from .truncated import (MixedModelConfig, NoiseParams, SprinkleField, TubeSpec,
                        TubeExtensionError, apply_noise,
                        build_interpolation_profiles, cover_count,
                        homogeneous_vacancy_probability,
                        inverse_power_offset_sum, sample_homogeneous,
                        sample_homogeneous_fields, sample_mixed,
                        sample_mixed_bound, sample_mixed_fields,
                        sample_sprinkle, sprinkle_pair_means,
                        sprinkle_pair_values, sprinkle_totals, tile_of,
                        trace_field, tube_transform, two_sided_J,
                        uniform_site_field)
from .torus import (TorusRun, calibrate_torus_constant, local_limit_compare,
                    pattern_vacancy_probability, sample_torus_vacant,
                    wilson_interval)
from .percolation import (ClusterLabeling, connected_components,
                          connected_components_bfs, crossing_probability,
                          disconnection_statistic, exist_unique, fkg_check,
                          make_interlacement_sampler, make_segment_sampler,
                          make_torus_sampler, sites_connected, theta_r,
                          two_point)
from .harness import (ExperimentConfig, ResourceBudgetError, ResultRecord,
                      TransitionResult, emit_plotdata, estimate_transition,
                      make_sampler, read_records, run_sweep, write_records)
from .acceptance import CriterionResult, format_result, run_criteria, run_criterion

__version__ = "0.1.0"
