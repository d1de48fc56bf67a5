#pragma once

#include "saane/attention.hpp"
#include "saane/config.hpp"
#include "saane/dataset.hpp"
#include "saane/eval.hpp"
#include "saane/fusion.hpp"
#include "saane/gradcheck.hpp"
#include "saane/io.hpp"
#include "saane/model.hpp"
#include "saane/optimizer.hpp"
#include "saane/sampling.hpp"
#include "saane/synth.hpp"
#include "saane/tape.hpp"
#include "saane/tensor.hpp"
#include "saane/trainer.hpp"
