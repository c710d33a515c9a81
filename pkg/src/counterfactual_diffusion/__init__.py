"""Counterfactual explanations for predict-only image classifiers using a small conditional
diffusion model, distilled prompt tokens and exactly invertible sampling."""
