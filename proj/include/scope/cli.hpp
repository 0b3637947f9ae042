// SPDX-License-Identifier: Apache-2.0
//
// The `scope` command line. Subcommands:
//
//   gen-corpus    synthetic translation corpus
//   train         fit a model on a corpus
//   generate      decode from a model
//   attribute     attribution map for a contract file
//   evaluate      map plus deletion/insertion faithfulness report
//   render        heatmap for an existing map
//   demo-fallacy  prefix mass under local vs prompt-conditioned contracts
//   rerun         repeat a run from its manifest and compare outputs
//
// Every command except rerun writes manifest.json next to its outputs.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace scope {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitValidation = 2,
  kExitNumeric = 3,
  kExitIo = 4,
};

// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace scope
