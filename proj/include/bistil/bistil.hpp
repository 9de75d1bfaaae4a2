// Copyright (c) 2026 The bistil Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "bistil/data.hpp"
#include "bistil/distill.hpp"
#include "bistil/errors.hpp"
#include "bistil/eval.hpp"
#include "bistil/model.hpp"
#include "bistil/optim.hpp"
#include "bistil/rng.hpp"
#include "bistil/sft.hpp"
#include "bistil/tensor.hpp"
#include "bistil/vocab.hpp"
