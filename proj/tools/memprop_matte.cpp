// SPDX-License-Identifier: Apache-2.0
#include "memprop/cli.hpp"

int main(int argc, char** argv) { return memprop::cli::run(argc, argv); }
