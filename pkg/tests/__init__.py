# Tests for the latent action bench
