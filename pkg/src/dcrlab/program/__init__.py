from .image import BasicBlock, BinaryImage, Function, PointerTable, ImageError
from .generator import BlockSizeDist, GeneratorSpec, InfeasibleSpec, generate

__all__ = ["BasicBlock", "BinaryImage", "Function", "PointerTable", "ImageError", "BlockSizeDist",
           "GeneratorSpec", "InfeasibleSpec", "generate"]
