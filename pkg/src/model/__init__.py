# Model module
