#include "skyfill/adapters.hpp"

#include "skyfill/common.hpp"

namespace skyfill {

void ExternalModelAdapter::unavailable(const char* hook) const {
  fail(ErrorKind::config,
       "adapter '" + name_ + "' has no compute backend in this build (" +
           hook +
           "); link the external network and implement the hook to use it");
}

}  // namespace skyfill
