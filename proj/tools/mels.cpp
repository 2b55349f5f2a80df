#include "mels/cli.hpp"

int main(int argc, char** argv) { return mels::run_cli(argc, argv); }
