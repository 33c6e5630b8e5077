"""Decision sources: scripted, tabular softmax, remote chat model."""
