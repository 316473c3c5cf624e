#pragma once

// JSON-lines trace export, one record per decode step:
//   {"step":0,"positions":[...],"tokens":[...],"scores":[...],"nfe":1}

#include <ostream>

#include "dos/decoding.hpp"
#include "json.hpp"

namespace dos {

inline nlohmann::json trace_step_json(std::size_t index, const TraceStep& step) {
    nlohmann::json j;
    j["step"] = index;
    j["positions"] = step.positions;
    j["tokens"] = step.tokens;
    j["scores"] = step.scores;
    j["nfe"] = step.nfe;
    return j;
}

inline void write_trace_jsonl(const DecodeTrace& trace, std::ostream& out) {
    for (std::size_t i = 0; i < trace.steps.size(); ++i) out << trace_step_json(i, trace.steps[i]).dump() << '\n';
}

}  // namespace dos
