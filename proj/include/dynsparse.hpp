// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The dynsparse Authors

/// \file dynsparse.hpp
/// Always-sparse dynamic sparse training on a teacher-student toy task.
/// Include this header for the whole library.

#ifndef DYNSPARSE_HPP
#define DYNSPARSE_HPP

#include "dynsparse/error.hpp"
#include "dynsparse/random.hpp"
#include "dynsparse/tensor.hpp"
#include "dynsparse/nn.hpp"
#include "dynsparse/optim.hpp"
#include "dynsparse/scheduler.hpp"
#include "dynsparse/metrics.hpp"
#include "dynsparse/flops.hpp"
#include "dynsparse/config.hpp"
#include "dynsparse/runner.hpp"

#endif  // DYNSPARSE_HPP
