#include "tstmle/harness.hpp"

int main(int argc, char** argv) { return tstmle::cli_main(argc, argv); }
