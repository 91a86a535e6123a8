#include "multitalk/process.hpp"

#include "multitalk/error.hpp"

#include <csignal>
#include <cstring>
#include <sys/wait.h>
#include <unistd.h>

namespace multitalk {

LineProcess::~LineProcess() { stop(); }

void LineProcess::start() {
  std::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2];
  int out_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
    throw AdapterError("cannot create pipes for '" + command_ + "'");
  }
  const pid_t pid = fork();
  if (pid < 0) throw AdapterError("fork failed for '" + command_ + "'");
  if (pid == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

std::string LineProcess::request(const std::string& line) {
  if (pid_ < 0) start();
  std::string payload = line;
  payload.push_back('\n');
  std::size_t written = 0;
  while (written < payload.size()) {
    const ssize_t n = write(to_child_, payload.data() + written, payload.size() - written);
    if (n <= 0) {
      stop();
      throw AdapterError("external process '" + command_ + "' closed its input");
    }
    written += static_cast<std::size_t>(n);
  }
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string reply = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!reply.empty() && reply.back() == '\r') reply.pop_back();
      return reply;
    }
    char chunk[4096];
    const ssize_t n = read(from_child_, chunk, sizeof(chunk));
    if (n <= 0) {
      stop();
      throw AdapterError("external process '" + command_ + "' exited without a reply");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

void LineProcess::stop() {
  if (pid_ < 0) return;
  close(to_child_);
  close(from_child_);
  int status = 0;
  waitpid(pid_, &status, 0);
  pid_ = -1;
  to_child_ = -1;
  from_child_ = -1;
  buffer_.clear();
}

}  // namespace multitalk
