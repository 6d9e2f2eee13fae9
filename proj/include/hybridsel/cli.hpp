#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hybridsel/baselines.hpp"
#include "hybridsel/calibration.hpp"
#include "hybridsel/model.hpp"
#include "hybridsel/pipeline.hpp"

namespace hybridsel {

// Everything one command needs, read from a JSON config document and then
// overridden by command-line flags. Missing keys take the standard-toy values.
struct RunConfig {
    ModelSpec spec = standard_toy_spec();
    PlantedCircuit circuit = standard_toy_circuit();
    NiahSpec niah;
    int calibration_examples = 64;
    int eval_examples = 64;
    std::string method = "bosch";
    BoschConfig bosch;
    int layers_per_group = 2;  // b-multi
    BaselineConfig baseline;
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out;

    void validate() const;
};

RunConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const RunConfig& config);

const std::vector<std::string>& known_methods();

// Entry point of the hybridsel binary. Exit codes: 0 ok, 2 bad configuration,
// 3 runtime or search failure. Diagnostics go to stderr.
int run_cli(int argc, char** argv);

}  // namespace hybridsel
