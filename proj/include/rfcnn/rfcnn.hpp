#pragma once

#include "rfcnn/arch.hpp"
#include "rfcnn/checkpoint.hpp"
#include "rfcnn/data.hpp"
#include "rfcnn/errors.hpp"
#include "rfcnn/experiment.hpp"
#include "rfcnn/metrics.hpp"
#include "rfcnn/model.hpp"
#include "rfcnn/ops.hpp"
#include "rfcnn/optim.hpp"
#include "rfcnn/random.hpp"
#include "rfcnn/rf.hpp"
#include "rfcnn/shake.hpp"
#include "rfcnn/tensor.hpp"
#include "rfcnn/training.hpp"
