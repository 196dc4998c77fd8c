// experiment orchestration (in progress)
