"""SO(2)-equivariant offline reinforcement learning at desk scale."""

from equirl.groups import (
    CyclicGroup,
    FactoredAction,
    FeatureField,
    Representation,
    act_on_action,
    act_on_action_with_sigma,
    act_on_field,
    act_on_image,
    compose,
    rep_matrix,
    rotate_image,
)

__all__ = [
    "CyclicGroup",
    "FactoredAction",
    "FeatureField",
    "Representation",
    "act_on_action",
    "act_on_action_with_sigma",
    "act_on_field",
    "act_on_image",
    "compose",
    "rep_matrix",
    "rotate_image",
]
