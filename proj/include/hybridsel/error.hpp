#pragma once

#include <stdexcept>
#include <string>

namespace hybridsel {

// Invalid user-facing configuration (CLI exit code 2).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised by the evaluation oracle when its evaluation budget is spent.
class BudgetExhausted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A computation whose inputs make the result undefined (zero span, no mass, ...).
class DegenerateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hybridsel
