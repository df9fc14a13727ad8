# Signed distance map module
