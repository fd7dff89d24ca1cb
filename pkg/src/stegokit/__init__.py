"""JPEG steganalysis toolkit: blockwise DCT codec, fixed DCT-residual front
end, trainable micro-CNN, stego-noise simulator, and diagnostic verifiers."""

__version__ = "0.1.0"
