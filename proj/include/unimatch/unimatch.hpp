// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "unimatch/autodiff.hpp"
#include "unimatch/checkpoint.hpp"
#include "unimatch/cli.hpp"
#include "unimatch/config.hpp"
#include "unimatch/episodes.hpp"
#include "unimatch/errors.hpp"
#include "unimatch/evaluation.hpp"
#include "unimatch/gin.hpp"
#include "unimatch/matcher.hpp"
#include "unimatch/meta.hpp"
#include "unimatch/metrics.hpp"
#include "unimatch/params.hpp"
#include "unimatch/rng.hpp"
#include "unimatch/smiles.hpp"
#include "unimatch/task_relation.hpp"
#include "unimatch/threads.hpp"
#include "unimatch/train.hpp"
