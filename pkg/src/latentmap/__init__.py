"""latentmap: aligns scRNA-seq and spatial transcriptomics latent spaces.

Trains a chain of variational autoencoders (plus a graph variational
autoencoder over the spot adjacency) whose latent spaces are tied together
by paired euclidean losses and an adversarial discriminator, then uses the
aligned spaces to impute spatial coordinates and panel expression for cells
that only have expression data.
"""

__version__ = "0.1.0"
