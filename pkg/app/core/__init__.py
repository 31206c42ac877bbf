"""Core building blocks: autodiff tensors, errors, seeding and monitoring."""
