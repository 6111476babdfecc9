class ConfigurationError(ValueError):
    """
    Raised when a scenario, agent, scheduler or campaign setting is invalid,
    e.g. an unknown scenario name or a perturbation aimed at a missing object.
    """

    pass


class EvaluationError(Exception):
    """Raised when a goal references an object absent from the world."""

    pass


class LabelingError(ValueError):
    """
    Raised by the value-labeling pipeline for empty corpora, out-of-range
    values or bins, and segment labels missing from an L_max table.
    """

    pass


class TrainingError(Exception):
    """Raised when the learned critic cannot be fit from the given frames."""

    pass


class AnnotationError(ValueError):
    """
    Raised by the annotation pipeline for trajectories that are too short,
    non-positive thresholds, empty vocabularies or malformed files.
    """

    pass


class FatalEpisodeError(Exception):
    """
    Raised when an agent fails during an episode.

    Episode runners catch it and record the message in the trace instead of
    letting it escape into the campaign.
    """

    pass
