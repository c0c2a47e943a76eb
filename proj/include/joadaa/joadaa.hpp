#pragma once

#include "joadaa/tensor.hpp"
#include "joadaa/random.hpp"
#include "joadaa/config.hpp"
#include "joadaa/synth_data.hpp"
#include "joadaa/memory_bank.hpp"
#include "joadaa/attention.hpp"
#include "joadaa/autograd.hpp"
#include "joadaa/model.hpp"
#include "joadaa/checkpoint.hpp"
#include "joadaa/evaluation.hpp"
#include "joadaa/training.hpp"
#include "joadaa/ablation.hpp"
#include "joadaa/report.hpp"
