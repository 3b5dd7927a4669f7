#pragma once

#include "modalseg/binary_io.hpp"
#include "modalseg/config.hpp"
#include "modalseg/dataio.hpp"
#include "modalseg/errors.hpp"
#include "modalseg/eval.hpp"
#include "modalseg/losses.hpp"
#include "modalseg/model.hpp"
#include "modalseg/ops.hpp"
#include "modalseg/relevance.hpp"
#include "modalseg/rng.hpp"
#include "modalseg/tensor.hpp"
#include "modalseg/trainer.hpp"
#include "modalseg/cli.hpp"
