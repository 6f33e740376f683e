import subprocess

import nox  # type: ignore

nox.options.reuse_existing_virtualenvs = True


@nox.session()
def tests(session):
    session.install(".[test]")
    session.run("pytest", *session.posargs)


@nox.session()
def acceptance(session):
    session.install(".[test]")
    session.run("pytest", "-m", "slow", *session.posargs)


@nox.session()
def selftest(session):
    session.install(".")
    session.run("refaudio", "selftest", *session.posargs)


def has_changes():
    status = (
        subprocess.run(
            "git status --porcelain", shell=True, check=True, stdout=subprocess.PIPE
        )
        .stdout.decode()
        .strip()
    )
    return len(status) > 0


@nox.session()
def build(session):
    if has_changes():
        session.warn("Building from a tree with uncommitted changes")
    session.install("--upgrade", "pip")
    session.install("build")
    session.run("rm", "-rf", "dist", "build", external=True)
    session.run("python", "-m", "build")
