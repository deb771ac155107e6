from laspet.neural.model import LasNet, LasNetConfig, count_parameters, init_weights, parameter_registry

__all__ = ["LasNet", "LasNetConfig", "count_parameters", "init_weights", "parameter_registry"]
