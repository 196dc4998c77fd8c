// configuration (in progress)
