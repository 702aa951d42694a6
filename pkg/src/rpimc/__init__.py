"""Radial point interpolation mixed collocation for transient diffusion."""
