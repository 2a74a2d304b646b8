// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "umv2/train.hpp"

namespace umv2 {

/// Arms of the desk-scale comparison: 4 blocks, hidden 128, byte vocab.
///   umv2:     memory in every block, m = 16, identity gate.
///   dense:    no memory, FFN widened to the same activated parameters.
///   peer_off: gate off and no pre-values; D_v widened so activated
///             parameters match umv2.
std::vector<std::string> desk_arms();

/// `data` is the corpus directory, `out_root/<arm>` the run directory.
TrainConfig desk_config(const std::string& arm, const std::string& data, const std::string& out_root,
                        double total_tokens = 30e6);

}  // namespace umv2
