// serialization (in progress)
