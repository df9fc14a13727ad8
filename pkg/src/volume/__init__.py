# Volume module
