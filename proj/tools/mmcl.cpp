#include "mmcl/cli.hpp"

int main(int argc, char** argv) { return mmcl::dispatch(argc, argv); }
