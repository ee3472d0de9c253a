# Makes the directory a package