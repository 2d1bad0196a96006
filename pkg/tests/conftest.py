import hypothesis

hypothesis.settings.register_profile(
    "fast", max_examples=20, derandomize=True)
hypothesis.settings.register_profile(
    "thorough", max_examples=300, derandomize=True)
hypothesis.settings.load_profile("fast")
