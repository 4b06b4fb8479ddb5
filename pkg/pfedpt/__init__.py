__version__ = "0.1"


from transformers import AutoConfig, AutoModelForImageClassification

from .configuration_fed_cnn import FedCNNConfig
from .modeling_fed_cnn import (
    BodyHeadSplit,
    FedCNNForImageClassification,
    ParameterVector,
    build_model,
    flatten_params,
    load_params,
    split_body_head,
)
from .numerics import (
    Gradients,
    LossContext,
    NonFiniteError,
    backward,
    finite_diff_grad,
    forward_loss,
    sgd_step,
)
from .visual_prompt import (
    PromptSpec,
    PromptState,
    TemplateMask,
    apply_prompt,
    init_prompt,
    prompt_grad_step,
    prompt_param_count,
)


AutoConfig.register("fed_cnn", FedCNNConfig)
AutoModelForImageClassification.register(FedCNNConfig, FedCNNForImageClassification)
