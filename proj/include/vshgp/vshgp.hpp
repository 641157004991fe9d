#pragma once

#include "vshgp/archive.hpp"
#include "vshgp/core.hpp"
#include "vshgp/data.hpp"
#include "vshgp/dvshgp.hpp"
#include "vshgp/error.hpp"
#include "vshgp/gradcheck.hpp"
#include "vshgp/init.hpp"
#include "vshgp/kernel.hpp"
#include "vshgp/kmeans.hpp"
#include "vshgp/linalg.hpp"
#include "vshgp/metrics.hpp"
#include "vshgp/model.hpp"
#include "vshgp/optim.hpp"
#include "vshgp/predict.hpp"
#include "vshgp/predictive.hpp"
#include "vshgp/seeds.hpp"
#include "vshgp/svshgp.hpp"
#include "vshgp/training.hpp"
#include "vshgp/worker_pool.hpp"
