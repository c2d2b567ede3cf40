from .camera import CAMERAS, IMAGE_SIZE, make_observation, read_ppm, render, write_ppm
from .data import (
    Dataset,
    EpisodeRecord,
    LoadedEpisode,
    dump_episode_ppms,
    generate_dataset,
    generate_pretrain_corpus,
    load_dataset,
    load_pretrain_corpus,
    read_episode,
    rollout_expert,
    write_episode,
)
from .scene import (
    COLOR_NAMES,
    COLOR_RGB,
    GRASP_RADIUS,
    LIFT_THRESHOLD,
    Action,
    GripperState,
    Observation,
    ObjectState,
    PlacementError,
    SceneState,
    TaskKind,
    TaskSpec,
    VariationSpec,
    check_success,
    episode_done,
    proprioception,
    reset,
    step,
    validate_variation,
)
from .tasks import (
    ExpertError,
    build_variations,
    expert_action,
    generate_caption,
    make_instruction,
    template_corpus,
)
