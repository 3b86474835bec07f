from utp.autograd.tensor import ComputeGraph, GraphNode, Tensor
from utp.autograd.gradcheck import GradcheckReport, gradcheck

__all__ = ["ComputeGraph", "GraphNode", "Tensor", "GradcheckReport", "gradcheck"]
