#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace zeroloc {

// Error taxonomy. The CLI maps kinds to exit codes:
//   Io, Input -> 1;  Shape, Config -> 2;  Numeric -> 3.
enum class ErrorKind { Shape, Config, Io, Input, Numeric };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

namespace detail {
inline void concat_into(std::ostringstream&) {}
template <typename T, typename... Rest>
void concat_into(std::ostringstream& os, const T& head, Rest&&... rest) {
    os << head;
    concat_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string concat(Args&&... args) {
    std::ostringstream os;
    detail::concat_into(os, std::forward<Args>(args)...);
    return os.str();
}

template <typename... Args>
[[noreturn]] void throw_shape(Args&&... args) {
    throw Error(ErrorKind::Shape, concat(std::forward<Args>(args)...));
}
template <typename... Args>
[[noreturn]] void throw_config(Args&&... args) {
    throw Error(ErrorKind::Config, concat(std::forward<Args>(args)...));
}
template <typename... Args>
[[noreturn]] void throw_io(Args&&... args) {
    throw Error(ErrorKind::Io, concat(std::forward<Args>(args)...));
}
template <typename... Args>
[[noreturn]] void throw_input(Args&&... args) {
    throw Error(ErrorKind::Input, concat(std::forward<Args>(args)...));
}
template <typename... Args>
[[noreturn]] void throw_numeric(Args&&... args) {
    throw Error(ErrorKind::Numeric, concat(std::forward<Args>(args)...));
}

}  // namespace zeroloc
