#pragma once

#include "dos/core.hpp"
#include "dos/distribution.hpp"
#include "dos/oracle.hpp"
#include "dos/joint_file.hpp"
#include "dos/scoring.hpp"
#include "dos/nn.hpp"
#include "dos/checkpoint.hpp"
#include "dos/decoding.hpp"
#include "dos/trace_io.hpp"
#include "dos/generators.hpp"
#include "dos/harness.hpp"
